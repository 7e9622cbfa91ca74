//! Dense row-major `f32` matrices.
//!
//! A [`Matrix`] is always `tokens x channels` for cache tensors. Batch, layer
//! and head dimensions are handled by owning one matrix per (batch, layer, head).
//! Empty matrices (zero rows) are legal and behave as identities for
//! [`Matrix::vstack`].

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from external data, rejecting wrong lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    /// An empty `0 x cols` matrix.
    pub fn empty(cols: usize) -> Self {
        Self::from_parts(0, cols, Vec::new())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "row {bad} has {} values, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// A single-row matrix.
    pub fn row_vector(values: Vec<f32>) -> Result<Self> {
        Self::new(1, values.len(), values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size, so zero-width matrices
        // yield `rows` empty slices through the range instead.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the token range `range` into a new matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.rows {
            return Err(Error::Shape(format!(
                "row range {}..{} out of bounds for {} rows",
                range.start, range.end, self.rows
            )));
        }
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Ok(Self::from_parts(range.len(), self.cols, data))
    }

    /// Copies the channel range `range` of every row into a new matrix.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.cols {
            return Err(Error::Shape(format!(
                "column range {}..{} out of bounds for {} columns",
                range.start, range.end, self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * range.len());
        for row in self.iter_rows() {
            data.extend_from_slice(&row[range.clone()]);
        }
        Ok(Self::from_parts(self.rows, range.len(), data))
    }

    /// Concatenates along the token axis.
    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {}x{} on {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self::from_parts(self.rows + other.rows, self.cols, data))
    }

    pub(crate) fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Removes the first `n` rows in place.
    pub(crate) fn drop_front_rows(&mut self, n: usize) {
        self.data.drain(..n * self.cols);
        self.rows -= n;
    }

    pub(crate) fn clear_rows(&mut self) {
        self.data.clear();
        self.rows = 0;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self::from_parts(self.rows, self.cols, data))
    }

    pub fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// `self * other`. Each output element accumulates over the inner index
    /// in ascending order, starting from zero.
    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let acc = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                axpy(a, other.row(k), acc);
            }
        }
        Ok(out)
    }

    /// `self * other^T`, i.e. row-by-row dot products.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_transposed {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * other.rows);
        for a in self.iter_rows() {
            data.extend(other.iter_rows().map(|b| dot(a, b)));
        }
        Ok(Self::from_parts(self.rows, other.rows, data))
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.rows {
            softmax_in_place(out.row_mut(i));
        }
        out
    }

    /// Frobenius norm, accumulated in `f64`.
    pub fn frobenius(&self) -> f64 {
        frobenius(&self.data)
    }

    /// Mean of each column.
    pub fn column_means(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.cols];
        for row in self.iter_rows() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        let n = self.rows.max(1) as f64;
        sums.into_iter().map(|s| (s / n) as f32).collect()
    }
}

/// Dot product accumulated left to right in `f32`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `acc += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], acc: &mut [f32]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return;
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

pub fn frobenius(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}
