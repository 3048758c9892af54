//! Row-major dense matrix used for per-voxel feature rows and weights.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Rows below this count run single-threaded; rayon overhead dominates.
const PAR_ROWS: usize = 64;

/// N×C row-major matrix. Per-voxel features use one row per occupied voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Per-voxel features: one row per occupied voxel, one column per channel.
pub type FeatureMatrix<T> = Matrix<T>;

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("{} values for a {rows}x{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "{op}: {}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(shape_err!(
                "matmul: {}x{} · {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(n, m);
        let kernel = |(i, out_row): (usize, &mut [T])| {
            let a = &self.data[i * k..(i + 1) * k];
            for (p, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b = &rhs.data[p * m..(p + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        };
        if n >= PAR_ROWS && m > 0 {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else if m > 0 {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(shape_err!(
                "matmul_nt: {}x{} · ({}x{})ᵀ",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = Self::zeros(n, m);
        let kernel = |(i, out_row): (usize, &mut [T])| {
            let a = &self.data[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a, &rhs.data[j * k..(j + 1) * k]);
            }
        };
        if n >= PAR_ROWS && m > 0 {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else if m > 0 {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`. Each output row sums over input rows in index order.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(shape_err!(
                "matmul_tn: ({}x{})ᵀ · {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(k, m);
        let kernel = |(p, out_row): (usize, &mut [T])| {
            for i in 0..n {
                let av = self.data[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let b = &rhs.data[i * m..(i + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        };
        if k >= 8 && n * m >= 4096 && m > 0 {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else if m > 0 {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// Column sums (reduction over rows in index order).
    pub fn col_sums(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.cols];
        for r in self.rows_iter() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        acc
    }

    /// Horizontal concatenation `[a ⊕ b ⊕ …]` along channels.
    pub fn hconcat(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(shape_err!("hconcat: {} rows vs {rows}", p.rows));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Inverse of [`Matrix::hconcat`]: split columns into blocks of the given widths.
    pub fn hsplit(&self, widths: &[usize]) -> Result<Vec<Self>> {
        if widths.iter().sum::<usize>() != self.cols {
            return Err(shape_err!("hsplit: widths {widths:?} vs {} columns", self.cols));
        }
        let mut out: Vec<Self> = widths.iter().map(|&w| Self::zeros(self.rows, w)).collect();
        for i in 0..self.rows {
            let row = self.row(i);
            let mut off = 0;
            for (part, &w) in out.iter_mut().zip(widths) {
                part.row_mut(i).copy_from_slice(&row[off..off + w]);
                off += w;
            }
        }
        Ok(out)
    }

    /// Gather rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `acc += s · x`.
#[inline]
pub fn axpy<T: Scalar>(acc: &mut [T], s: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += s * v;
    }
}
