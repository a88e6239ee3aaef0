//! Minimal row-major `f32` matrix used by the reference numerics.
//!
//! Products accumulate in `f64` and round once, so reordering the reduction
//! axis (as channel permutations do) leaves results unchanged in practice.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// `out[c] = self[:, perm[c]]`.
    pub fn gather_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.cols {
            return Err(shape(format!(
                "column permutation of length {} for {} columns",
                perm.len(),
                self.cols
            )));
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let src = self.row(r);
            for (dst, &p) in out.row_mut(r).iter_mut().zip(perm) {
                *dst = src[p];
            }
        }
        Ok(out)
    }

    /// `out[r] = self[perm[r], :]`.
    pub fn gather_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rows {
            return Err(shape(format!(
                "row permutation of length {} for {} rows",
                perm.len(),
                self.rows
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// `x (n x k) * w (k x m)` for `x` given as flat rows.
pub fn matmul_rows(x: &[f32], k: usize, w: &Matrix) -> Result<Vec<f32>> {
    if w.rows != k || (k > 0 && !x.len().is_multiple_of(k)) {
        return Err(shape(format!(
            "cannot multiply rows of width {k} ({} values) by a {}x{} matrix",
            x.len(),
            w.rows,
            w.cols
        )));
    }
    let n = x.len().checked_div(k).unwrap_or(0);
    let m = w.cols;
    let mut out = vec![0.0f32; n * m];
    let mut acc = vec![0.0f64; m];
    for (row, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&xv, wrow) in row.iter().zip(w.data.chunks_exact(m)) {
            let xv = f64::from(xv);
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * f64::from(wv);
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>() as f32
}

pub fn add_bias(rows: &mut [f32], bias: &[f32]) {
    for row in rows.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Unweighted RMS normalization of each row.
pub fn rms_norm(rows: &[f32], width: usize, eps: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows.chunks_exact(width) {
        let ms = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / width as f64;
        let inv = (1.0 / (ms + f64::from(eps)).sqrt()) as f32;
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = matmul_rows(&[1.0, 1.0, 2.0, 0.0], 2, &w).unwrap();
        assert_eq!(out, vec![5.0, 7.0, 9.0, 2.0, 4.0, 6.0]);
        assert!(matmul_rows(&[1.0, 1.0, 1.0], 3, &w).is_err());
    }

    #[test]
    fn gathers() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = m.gather_columns(&[2, 0, 1]).unwrap();
        assert_eq!(c.data(), &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
        let r = m.gather_rows(&[1, 0]).unwrap();
        assert_eq!(r.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        assert!(m.gather_columns(&[0, 1]).is_err());
    }
}
