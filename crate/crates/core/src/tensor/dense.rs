use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Dense row-major array of `f64`.
///
/// Most operations treat a tensor as a matrix whose column count is the last
/// dimension and whose row count is the product of the leading dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return dim_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `rows × cols` matrix from row slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return dim_err(format!(
                    "ragged rows: row 0 has {cols} columns, row {i} has {}",
                    row.len()
                ));
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            shape: vec![1, n],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Last dimension (1 for a zero-dimensional tensor).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all dimensions but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Row-major `a (r×s) · b (s×t)` accumulated into `out (r×t)`.
///
/// Zero entries of `a` are skipped, which matters for TF-IDF inputs where most
/// columns are empty.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let out_row = &mut out[i * t..(i + 1) * t];
        for k in 0..s {
            let aik = a[i * s + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * t..(k + 1) * t];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out (r×s) += g (r×t) · bᵀ` where `b` is `s×t`.
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let g_row = &g[i * t..(i + 1) * t];
        for k in 0..s {
            let b_row = &b[k * t..(k + 1) * t];
            out[i * s + k] += dot(g_row, b_row);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out (s×t) += aᵀ · g` where `a` is `r×s` and `g` is `r×t`.
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let g_row = &g[i * t..(i + 1) * t];
        for k in 0..s {
            let aik = a[i * s + k];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[k * t..(k + 1) * t];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_value_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(Tensor::from_rows(&rows).is_err());
    }

    #[test]
    fn gemm_kernels_agree_with_naive_product() {
        let a = [1.0, 2.0, 0.0, 3.0, -1.0, 4.0];
        let b = [0.5, -2.0, 1.0, 1.5, 2.0, 0.0];
        let mut ab = [0.0; 4];
        gemm_acc(&a, &b, &mut ab, 2, 3, 2);
        assert_eq!(ab, [2.5, 1.0, 8.5, -7.5]);

        // g·bᵀ with b viewed as 2×3 (r=2, s=2, t=3)
        let mut nt = [0.0; 4];
        gemm_nt_acc(&a, &b, &mut nt, 2, 2, 3);
        assert_eq!(nt, [-3.5, 5.5, 7.5, 2.5]);

        let mut tn = [0.0; 4];
        gemm_tn_acc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], &mut tn, 2, 2, 2);
        assert_eq!(tn, [1.0, 3.0, 2.0, 4.0]);
    }
}
