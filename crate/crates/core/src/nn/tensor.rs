//! Row-major double-precision tensors and strided matrix products.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &dim)| {
                assert!(i < dim, "index {index:?} out of bounds for {:?}", self.shape);
                acc * dim + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Contiguous slice for a fixed prefix of leading indices.
    pub fn slice(&self, prefix: &[usize]) -> &[f64] {
        let inner: usize = self.shape[prefix.len()..].iter().product();
        let mut full = prefix.to_vec();
        full.resize(self.shape.len(), 0);
        let start = self.offset(&full);
        &self.data[start..start + inner]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        View {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn columns(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        View {
            offset: self.offset + start * self.cs,
            cols: len,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        ViewMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn columns(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        ViewMut {
            offset: self.offset + start * self.cs,
            cols: len,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(a: View<'_>, b: View<'_>, c: ViewMut<'_>, alpha: f64, beta: f64) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above for its full extent, and the
    // output is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense `(n × k) * (k × m)` product of row-major buffers.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    gemm(View::new(a, n, k), View::new(b, k, m), ViewMut::new(&mut out, n, m), 1.0, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let got = matmul(&a, &b, 3, 4, 5);
        let want = naive(&a, &b, 3, 4, 5);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_and_column_views() {
        // a is 2x3; compute a^T a (3x3) and a column block product
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 9];
        gemm(View::new(&a, 2, 3).t(), View::new(&a, 2, 3), ViewMut::new(&mut out, 3, 3), 1.0, 0.0);
        assert_eq!(out, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);

        let mut block = vec![0.0; 4];
        let cols = View::new(&a, 2, 3).columns(1, 2);
        gemm(cols, cols.t(), ViewMut::new(&mut block, 2, 2), 1.0, 0.0);
        assert_eq!(block, vec![13.0, 28.0, 28.0, 61.0]);
    }

    #[test]
    fn tensor_indexing() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.slice(&[1]), &[3.0, 4.0, 5.0]);
        assert!(t.is_finite());
    }
}
