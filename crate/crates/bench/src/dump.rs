//! `KVQD` tensor dumps.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "KVQD"
//! 4       4           version, u32 = 1
//! 8       1           dtype, u8 (0 = f32)
//! 9       1           ndim, u8
//! 10      8 * ndim    dims, u64 each
//! ..      4 * prod    payload, row-major f32
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use kvquant::Matrix;
use thiserror::Error;

use crate::error::Result;

pub const MAGIC: &[u8; 4] = b"KVQD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

const DIMS_OFFSET: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed dump at byte {offset}: {message}")]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> std::result::Result<T, FormatError> {
    Err(FormatError {
        offset,
        message: message.into(),
    })
}

/// A decoded dump: its shape and flat row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpTensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl DumpTensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.as_slice().to_vec(),
        }
    }

    /// Stacks equally shaped matrices into a `[n, rows, cols]` tensor.
    pub fn stack(matrices: &[Matrix]) -> std::result::Result<Self, kvquant::Error> {
        let (rows, cols) = matrices.first().map(Matrix::shape).unwrap_or((0, 0));
        let mut data = Vec::with_capacity(matrices.len() * rows * cols);
        for m in matrices {
            if m.shape() != (rows, cols) {
                return Err(kvquant::Error::Shape(format!(
                    "cannot stack {}x{} with {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Self {
            dims: vec![matrices.len() as u64, rows as u64, cols as u64],
            data,
        })
    }

    /// Splits into matrices over the last two dims. A 1-D tensor is one row
    /// and a 0-D tensor is a 1x1 matrix.
    pub fn into_matrices(self) -> Vec<Matrix> {
        let (rows, cols) = match self.dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n as usize),
            [.., r, c] => (*r as usize, *c as usize),
        };
        let per = rows * cols;
        let count = if self.dims.len() <= 2 {
            1
        } else {
            self.dims[..self.dims.len() - 2].iter().product::<u64>() as usize
        };
        (0..count)
            .map(|i| {
                Matrix::new(rows, cols, self.data[i * per..(i + 1) * per].to_vec())
                    .expect("payload checked finite")
            })
            .collect()
    }
}

pub fn encode(tensor: &DumpTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(DIMS_OFFSET + 8 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(u8::try_from(tensor.dims.len()).expect("at most 255 dims"));
    for d in &tensor.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<DumpTensor, FormatError> {
    let take = |start: usize, len: usize, what: &str| -> std::result::Result<&[u8], FormatError> {
        match bytes.get(start..start + len) {
            Some(b) => Ok(b),
            None => fail(bytes.len(), format!("file ends inside the {what}")),
        }
    };
    if take(0, 4, "magic")? != MAGIC {
        return fail(0, "bad magic, expected \"KVQD\"");
    }
    let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return fail(4, format!("unsupported version {version}"));
    }
    let dtype = take(8, 1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return fail(8, format!("unsupported dtype {dtype}"));
    }
    let ndim = take(9, 1, "ndim")?[0] as usize;

    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for i in 0..ndim {
        let at = DIMS_OFFSET + 8 * i;
        let d = u64::from_le_bytes(take(at, 8, "dims")?.try_into().unwrap());
        count = match count.checked_mul(d) {
            Some(c) if c <= (usize::MAX / 4) as u64 => c,
            _ => return fail(at, "element count overflows"),
        };
        dims.push(d);
    }

    let start = DIMS_OFFSET + 8 * ndim;
    let payload_len = count as usize * 4;
    let end = match start.checked_add(payload_len) {
        Some(end) => end,
        None => return fail(start, "payload size overflows"),
    };
    if bytes.len() < end {
        return fail(
            bytes.len(),
            format!("payload truncated, expected {end} bytes"),
        );
    }
    if bytes.len() > end {
        return fail(end, format!("{} trailing bytes", bytes.len() - end));
    }
    let mut data = Vec::with_capacity(count as usize);
    for (i, chunk) in bytes[start..end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return fail(start + 4 * i, "non-finite value");
        }
        data.push(v);
    }
    Ok(DumpTensor { dims, data })
}

/// Writes one matrix as a 2-D dump, or several as a 3-D `[n, rows, cols]` dump.
pub fn write_dump(path: impl AsRef<Path>, tensors: &[Matrix]) -> Result<()> {
    let tensor = match tensors {
        [m] => DumpTensor::from_matrix(m),
        _ => DumpTensor::stack(tensors)?,
    };
    fs::write(path, encode(&tensor))?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?.into_matrices())
}
