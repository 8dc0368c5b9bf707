//! Dense row-major `f64` tensors and the raw kernels the tape is built on.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Precondition(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != cols) {
            return Err(Error::Precondition("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[index * cols..(index + 1) * cols]
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        let cols = self.cols();
        &mut self.data[index * cols..(index + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|value| value.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[rows, cols] => Ok((rows, cols)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }
}

/// `c[r×c] = a[r×k] · b[k×c]`.
///
/// Each output entry accumulates over `k` in ascending order, independent of
/// how many columns are computed, so adding columns never perturbs others.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, inner) = a.expect_matrix("matmul")?;
    let (inner_b, cols) = b.expect_matrix("matmul")?;
    if inner != inner_b {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; rows * cols];
    mm_acc(&a.data, &b.data, &mut out, rows, inner, cols);
    Tensor::matrix(rows, cols, out)
}

/// `out[r×c] += a[r×k] · b[k×c]`
pub(crate) fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        let a_row = &a[i * inner..(i + 1) * inner];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[k * cols..(k + 1) * cols];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
}

/// `out[k×c] += aᵀ · g` where `a` is `r×k` and `g` is `r×c`.
pub(crate) fn mm_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for i in 0..rows {
        let a_row = &a[i * inner..(i + 1) * inner];
        let g_row = &g[i * cols..(i + 1) * cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let out_row = &mut out[k * cols..(k + 1) * cols];
            for (o, &g_ij) in out_row.iter_mut().zip(g_row) {
                *o += a_ik * g_ij;
            }
        }
    }
}

/// `out[r×k] += g · bᵀ` where `g` is `r×c` and `b` is `k×c`.
pub(crate) fn mm_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for i in 0..rows {
        let g_row = &g[i * cols..(i + 1) * cols];
        let out_row = &mut out[i * inner..(i + 1) * inner];
        for (k, o) in out_row.iter_mut().enumerate() {
            *o += dot(g_row, &b[k * cols..(k + 1) * cols]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one row, written into `out`.
/// Entries equal to `-inf` receive probability zero.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() };
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let cols = logits.cols();
    let mut out = vec![0.0; logits.numel()];
    for (src, dst) in logits.data.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_into(src, dst);
    }
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

/// `log Σ exp(row)`, stable.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row
        .iter()
        .filter(|x| **x != f64::NEG_INFINITY)
        .map(|x| (x - max).exp())
        .sum();
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, -1.0, 2.0], vec![0.5, 4.0, 7.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let message = matmul(&a, &b).unwrap_err().to_string();
        assert!(message.contains("[2, 3]"), "{message}");
        assert!(message.contains("vs"), "{message}");
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn softmax_uniform_and_hand_values() {
        let uniform = softmax(&Tensor::vector(vec![0.0; 4]));
        for p in uniform.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let p = softmax(&Tensor::vector(vec![2.0, 1.0, 0.0, 0.0]));
        let expected = [0.6103, 0.2245, 0.0826, 0.0826];
        for (got, want) in p.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, 0.7]);
        let shifted = Tensor::vector(base.data().iter().map(|x| x + 10.0).collect());
        let diff = softmax(&base).max_abs_diff(&softmax(&shifted)).unwrap();
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let p = softmax(&Tensor::vector(vec![0.0, f64::NEG_INFINITY, 0.0]));
        assert_eq!(p.data(), &[0.5, 0.0, 0.5]);
    }
}
