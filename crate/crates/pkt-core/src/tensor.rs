//! Row-major f64 arrays, the value type for all weights and activations.

use crate::{PktError, Result};

/// Dense array with row-major 64-bit float storage.
///
/// Most of the library works with rank-2 arrays; rank-1 is used for biases
/// and gains. The shape is never empty and every dimension is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(PktError::Shape {
                op: "new",
                detail: format!("invalid shape {shape:?}"),
            });
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(PktError::Shape {
                op: "new",
                detail: format!("shape {shape:?} wants {expect} values, got {}", data.len()),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && n > 0, "invalid shape {shape:?}");
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(PktError::Shape {
                op: "from_rows",
                detail: "ragged or empty row list".into(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Array {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a rank-2 array (a rank-1 array counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a rank-2 array, or the length of a rank-1 array.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fill from a normal distribution, via the caller's uniform source.
    /// Box-Muller on pairs keeps this independent of rand's distribution
    /// internals so a pinned seed stays pinned.
    pub fn fill_normal<R: rand::Rng>(&mut self, rng: &mut R, std: f64) {
        let mut i = 0;
        while i < self.data.len() {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.data[i] = r * theta.cos() * std;
            i += 1;
            if i < self.data.len() {
                self.data[i] = r * theta.sin() * std;
                i += 1;
            }
        }
    }
}

/// Dense matmul: [m,k] x [k,n] -> [m,n]. ikj loop order for cache locality.
pub(crate) fn matmul_into(out: &mut [f64], a: &Array, b: &Array, m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    let ad = &a.data;
    let bd = &b.data;
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// A @ B^T: [m,k] x [n,k] -> [m,n].
pub(crate) fn matmul_nt_into(out: &mut [f64], a: &Array, b: &Array, m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    let ad = &a.data;
    let bd = &b.data;
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// A^T @ B: [k,m] x [k,n] -> [m,n]. Used by backward passes.
pub(crate) fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}
