//! Group-wise asymmetric round-to-nearest quantization.
//!
//! A group of values `x` is stored as integer codes
//! `q = clamp(round((x - z) / s), 0, 2^B - 1)` with zero-point `z = min(x)` and
//! scale `s = (max(x) - min(x)) / (2^B - 1)`, and reconstructed as `q * s + z`.
//!
//! Groups run along one of two axes of a `tokens x channels` matrix:
//!
//! * [`Axis::PerChannel`]: a group is `G` consecutive tokens of one channel.
//!   Groups are ordered block-major, `(token block, channel)`, so appending a
//!   new block of `G` tokens only appends groups.
//! * [`Axis::PerToken`]: a group is `G` consecutive channels of one token, so
//!   the code stream is plain row-major order.
//!
//! Zero-points are kept as `f32` (they are input values). Scales are kept as
//! `f64` so that `code * s + z` lands exactly on the group maximum after
//! rounding back to `f32`.

pub mod pack;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use pack::{pack_codes, packed_len, unpack_codes, PackedCodes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    PerToken,
    PerChannel,
}

impl Axis {
    /// Short label used in reports, `T` or `C`.
    pub fn label(self) -> &'static str {
        match self {
            Axis::PerToken => "T",
            Axis::PerChannel => "C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantParams {
    bits: u8,
    group_size: usize,
    axis: Axis,
}

impl QuantParams {
    pub fn new(bits: u8, group_size: usize, axis: Axis) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Usage(format!("bit width {bits} outside 1..=8")));
        }
        if group_size == 0 {
            return Err(Error::Usage("group size must be positive".into()));
        }
        Ok(Self {
            bits,
            group_size,
            axis,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn max_code(&self) -> u8 {
        max_code(self.bits)
    }
}

fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// One quantized group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCodes {
    pub codes: Vec<u8>,
    pub zero: f32,
    pub scale: f64,
}

pub fn quantize_group(values: &[f32], bits: u8) -> Result<GroupCodes> {
    if values.is_empty() {
        return Err(Error::Usage("cannot quantize an empty group".into()));
    }
    if !(1..=8).contains(&bits) {
        return Err(Error::Usage(format!("bit width {bits} outside 1..=8")));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (min, max) = min_max(values);
    let top = max_code(bits);
    if max == min {
        return Ok(GroupCodes {
            codes: vec![0; values.len()],
            zero: min,
            scale: 1.0,
        });
    }
    let scale = (max as f64 - min as f64) / top as f64;
    let codes = values
        .iter()
        .map(|&v| {
            ((v as f64 - min as f64) / scale)
                .round_ties_even()
                .clamp(0.0, top as f64) as u8
        })
        .collect();
    Ok(GroupCodes {
        codes,
        zero: min,
        scale,
    })
}

fn min_max(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Reconstructs one element. Every dequantization path goes through here.
#[inline]
pub fn dequantize_value(code: u8, zero: f32, scale: f64) -> f32 {
    (zero as f64 + code as f64 * scale) as f32
}

pub fn dequantize_group(codes: &[u8], zero: f32, scale: f64) -> Vec<f32> {
    codes
        .iter()
        .map(|&c| dequantize_value(c, zero, scale))
        .collect()
}

/// Packed quantized matrix with per-group zero-points and scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    params: QuantParams,
    rows: usize,
    cols: usize,
    /// Grouped-axis extent after zero padding.
    padded_extent: usize,
    codes: PackedCodes,
    zeros: Vec<f32>,
    scales: Vec<f64>,
}

impl QuantizedTensor {
    /// An empty `0 x cols` tensor, ready for [`QuantizedTensor::append`].
    pub fn empty(params: QuantParams, cols: usize) -> Result<Self> {
        if params.axis == Axis::PerToken && !cols.is_multiple_of(params.group_size) {
            return Err(Error::Shape(format!(
                "per-token groups of {} do not tile {cols} channels",
                params.group_size
            )));
        }
        let padded_extent = match params.axis {
            Axis::PerChannel => 0,
            Axis::PerToken => cols,
        };
        Ok(Self {
            params,
            rows: 0,
            cols,
            padded_extent,
            codes: PackedCodes::new(params.bits)?,
            zeros: Vec::new(),
            scales: Vec::new(),
        })
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn group_count(&self) -> usize {
        self.zeros.len()
    }

    pub fn codes(&self) -> &PackedCodes {
        &self.codes
    }

    pub fn packed_bytes(&self) -> &[u8] {
        self.codes.as_bytes()
    }

    pub fn zeros(&self) -> &[f32] {
        &self.zeros
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn is_padded(&self) -> bool {
        match self.params.axis {
            Axis::PerChannel => self.padded_extent != self.rows,
            Axis::PerToken => self.padded_extent != self.cols,
        }
    }

    /// Appends `other` along the token axis. Both tensors must be unpadded
    /// and share parameters and width.
    pub fn append(&mut self, other: &QuantizedTensor) -> Result<()> {
        if other.params != self.params || other.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot append {}x{} {:?} onto {}x{} {:?}",
                other.rows, other.cols, other.params, self.rows, self.cols, self.params
            )));
        }
        if self.is_padded() || other.is_padded() {
            return Err(Error::Usage("padded tensors cannot be appended".into()));
        }
        self.codes.extend_from(&other.codes)?;
        self.zeros.extend_from_slice(&other.zeros);
        self.scales.extend_from_slice(&other.scales);
        self.rows += other.rows;
        if self.params.axis == Axis::PerChannel {
            self.padded_extent = self.rows;
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Matrix {
        let g = self.params.group_size;
        let mut out = Matrix::zeros(self.rows, self.cols);
        let mut buf = vec![0u8; g];
        match self.params.axis {
            Axis::PerChannel => {
                for group in 0..self.group_count() {
                    let (block, col) = (group / self.cols, group % self.cols);
                    self.codes.read_into(group * g, &mut buf);
                    for (t, &code) in buf.iter().enumerate() {
                        let row = block * g + t;
                        if row < self.rows {
                            let v = dequantize_value(code, self.zeros[group], self.scales[group]);
                            out.set(row, col, v);
                        }
                    }
                }
            }
            Axis::PerToken => {
                let blocks = self.padded_extent / g;
                for group in 0..self.group_count() {
                    let (row, block) = (group / blocks, group % blocks);
                    self.codes.read_into(group * g, &mut buf);
                    for (k, &code) in buf.iter().enumerate() {
                        let col = block * g + k;
                        if col < self.cols {
                            let v = dequantize_value(code, self.zeros[group], self.scales[group]);
                            out.set(row, col, v);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Quantizes `m`, requiring the grouped axis to be a multiple of `G`.
pub fn quantize_matrix(m: &Matrix, params: QuantParams) -> Result<QuantizedTensor> {
    let (axis_name, extent) = grouped_extent(m, params.axis);
    if extent % params.group_size != 0 {
        return Err(Error::Shape(format!(
            "{axis_name} extent {extent} is not a multiple of group size {}",
            params.group_size
        )));
    }
    quantize_padded(m, params)
}

/// Quantizes `m`, zero-padding the grouped axis up to a multiple of `G`.
pub fn quantize_padded(m: &Matrix, params: QuantParams) -> Result<QuantizedTensor> {
    let (_, extent) = grouped_extent(m, params.axis);
    let padded_extent = extent.div_ceil(params.group_size) * params.group_size;
    let mut codes = PackedCodes::new(params.bits)?;
    let mut zeros = Vec::new();
    let mut scales = Vec::new();
    for_each_group(m, params, padded_extent, |values| {
        let q = quantize_group(values, params.bits)?;
        for &c in &q.codes {
            codes.push(c)?;
        }
        zeros.push(q.zero);
        scales.push(q.scale);
        Ok(())
    })?;
    Ok(QuantizedTensor {
        params,
        rows: m.rows(),
        cols: m.cols(),
        padded_extent,
        codes,
        zeros,
        scales,
    })
}

/// Quantize-then-dequantize with zero padding, at any width in `1..=8`.
pub fn fake_quantize(m: &Matrix, params: QuantParams) -> Matrix {
    let (_, extent) = grouped_extent(m, params.axis);
    let g = params.group_size;
    let padded_extent = extent.div_ceil(g) * g;
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut group = 0usize;
    for_each_group(m, params, padded_extent, |values| {
        let q = quantize_group(values, params.bits).expect("finite non-empty group");
        let restored = dequantize_group(&q.codes, q.zero, q.scale);
        match params.axis {
            Axis::PerChannel => {
                let (block, col) = (group / m.cols(), group % m.cols());
                for (t, &v) in restored.iter().enumerate() {
                    if block * g + t < m.rows() {
                        out.set(block * g + t, col, v);
                    }
                }
            }
            Axis::PerToken => {
                let blocks = padded_extent / g;
                let (row, block) = (group / blocks, group % blocks);
                for (k, &v) in restored.iter().enumerate() {
                    if block * g + k < m.cols() {
                        out.set(row, block * g + k, v);
                    }
                }
            }
        }
        group += 1;
        Ok(())
    })
    .expect("fake quantization cannot fail on a valid matrix");
    out
}

fn grouped_extent(m: &Matrix, axis: Axis) -> (&'static str, usize) {
    match axis {
        Axis::PerChannel => ("token", m.rows()),
        Axis::PerToken => ("channel", m.cols()),
    }
}

/// Visits every group in storage order, zero padding past the logical extent.
fn for_each_group(
    m: &Matrix,
    params: QuantParams,
    padded_extent: usize,
    mut f: impl FnMut(&[f32]) -> Result<()>,
) -> Result<()> {
    let g = params.group_size;
    let mut buf = vec![0.0f32; g];
    match params.axis {
        Axis::PerChannel => {
            for block in 0..padded_extent / g {
                for col in 0..m.cols() {
                    for (t, slot) in buf.iter_mut().enumerate() {
                        let row = block * g + t;
                        *slot = if row < m.rows() { m.get(row, col) } else { 0.0 };
                    }
                    f(&buf)?;
                }
            }
        }
        Axis::PerToken => {
            for row in m.iter_rows() {
                for block in 0..padded_extent / g {
                    for (k, slot) in buf.iter_mut().enumerate() {
                        *slot = row.get(block * g + k).copied().unwrap_or(0.0);
                    }
                    f(&buf)?;
                }
            }
        }
    }
    Ok(())
}
