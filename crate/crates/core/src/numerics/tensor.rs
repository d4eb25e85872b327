use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Rank-1 tensors act as row vectors (`1 x n`) wherever a matrix is expected.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction (index {i})")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs; the caller guarantees the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![1, 1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn row(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![1, data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for internal kernels that preserve finiteness.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` view: rank-1 is a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = *self.shape.last().unwrap();
        self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Returns a tensor with the same data and a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Slice along the outermost axis: `[a, b, c]` -> `[b, c]` at index `i`.
    pub fn outer(&self, i: usize) -> Result<Self> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(Error::shape(format!(
                "outer index {i} out of range for {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        ))
    }

    /// Stacks equal-shaped tensors along a new outer axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("stack"))?;
        if parts.iter().any(|p| p.shape != first.shape) {
            return Err(Error::shape("stack of unequal shapes"));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Concatenates along the feature (column) axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Self> {
        let (r, a) = self.dims2()?;
        let (r2, b) = other.dims2()?;
        if r != r2 {
            return Err(Error::shape(format!(
                "concat rows {r} vs {r2}"
            )));
        }
        let mut out = Vec::with_capacity(r * (a + b));
        for i in 0..r {
            out.extend_from_slice(&self.data[i * a..(i + 1) * a]);
            out.extend_from_slice(&other.data[i * b..(i + 1) * b]);
        }
        Ok(Tensor::from_parts(vec![r, a + b], out))
    }

    /// Adds a `1 x c` row to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let (one, c2) = row.dims2()?;
        if one != 1 || c != c2 {
            return Err(Error::shape(format!(
                "row broadcast {:?} + {:?}",
                self.shape, row.shape
            )));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(Tensor::from_parts(vec![r, c], out))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if c == 0 || r == 0 {
            return Err(Error::DegenerateShape(format!("softmax over {:?}", self.shape)));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(Tensor::from_parts(vec![r, c], out))
    }

    /// Mean over rows: `r x c` -> `1 x c`.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if r == 0 {
            return Err(Error::DegenerateShape("mean over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(Tensor::from_parts(vec![1, c], out))
    }
}

/// Layer normalisation of a vector to zero mean and unit population variance.
pub fn layer_norm(v: &Tensor, eps: f64) -> Result<Tensor> {
    if v.rank() != 1 || v.numel() < 2 {
        return Err(Error::DegenerateShape(format!(
            "layer norm needs a vector of length >= 2, got {:?}",
            v.shape()
        )));
    }
    let mut out = v.data().to_vec();
    layer_norm_in_place(&mut out, eps);
    Tensor::new(vec![out.len()], out)
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_row(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::shape(format!("softmax_row needs rank 2, got {:?}", m.shape())));
    }
    m.softmax_rows()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Normalises in place; returns the inverse standard deviation used.
pub(crate) fn layer_norm_in_place(row: &mut [f64], eps: f64) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    inv_std
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T b` for `a: k x m`, `b: k x n`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a b^T` for `a: m x k`, `b: n x k`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let m = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(softmax_row(&m).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_ln2_gives_thirds() {
        let m = Tensor::from_rows(&[[0.0, 2f64.ln()]]).unwrap();
        let s = softmax_row(&m).unwrap();
        assert_abs_diff_eq!(s.data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let m = Tensor::from_rows(&[[1000.0, 1000.0, -1000.0]]).unwrap();
        let s = softmax_row(&m).unwrap();
        assert!(s.is_finite());
        assert_abs_diff_eq!(s.data()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_row() {
        let m = Tensor::from_parts(vec![2, 0], vec![]);
        assert!(matches!(softmax_row(&m), Err(Error::DegenerateShape(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let c = Tensor::vector(vec![3.0, 3.0, 3.0]).unwrap();
        assert_eq!(layer_norm(&c, 1e-5).unwrap().data(), &[0.0, 0.0, 0.0]);

        let v = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let out = layer_norm(&v, 0.0).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);

        let short = Tensor::vector(vec![1.0]).unwrap();
        assert!(layer_norm(&short, 1e-5).is_err());
    }

    #[test]
    fn constructor_rejects_nan_and_bad_length() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::identity(2);
        assert_eq!(a.matmul(&b).unwrap(), a);
        let t = a.transpose().unwrap();
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(a.matmul(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn outer_slices_and_stack_roundtrip() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let parts = vec![t.outer(0).unwrap(), t.outer(1).unwrap()];
        assert_eq!(parts[1].data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(Tensor::stack(&parts).unwrap(), t);
    }
}
