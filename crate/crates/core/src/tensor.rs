//! Dense row-major 2-D arrays and the small set of kernels the lab needs.
//!
//! Shapes are `(rows, cols)`; a scalar is `1x1` and a row vector `1xn`.
//! All kernels are deterministic: per-element results never depend on the
//! number of worker threads, because parallelism only ever splits work
//! across disjoint output rows while each row is accumulated in a fixed
//! serial order.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Minimum number of multiply-adds before a kernel bothers with threads.
/// Desk-scale training matmuls (batch 500, hidden <= 64) run fastest
/// serial; threads only pay off for the wide softmax-head products that
/// show up at K >= 10.
const PAR_FLOP_THRESHOLD: usize = 8_000_000;

/// Dense row-major matrix (scalars and vectors are degenerate matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vec(data: Vec<S>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a `1x1` tensor.
    pub fn item(&self) -> S {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape());
        self.data[0]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Sum of squared entries, accumulated in index order.
    pub fn sq_sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc + x * x)
    }

    /// Casts every entry through `f64` (used by the 64-bit model files).
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.to_f64().unwrap()).collect(),
        }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Self {
        Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|&x| S::from(x).unwrap()).collect(),
        }
    }
}

#[inline]
fn axpy<S: Scalar>(out: &mut [S], a: S, x: &[S]) {
    for (o, &xv) in out.iter_mut().zip(x.iter()) {
        *o = a.mul_add(xv, *o);
    }
}

/// One output row of `a_row * b`, accumulated over `k` in index order.
/// The k-loop is unrolled by four so the accumulator row stays in
/// registers across several fused multiply-adds; arithmetic order is the
/// same as the plain k-ascending loop because every step is a single fma.
#[inline]
fn matvec_row_acc<S: Scalar>(out_row: &mut [S], a_row: &[S], b: &Tensor<S>) {
    let kk = a_row.len();
    let n = out_row.len();
    let bd = b.data();
    let mut k = 0;
    while k + 4 <= kk {
        let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
        let b0 = &bd[k * n..(k + 1) * n];
        let b1 = &bd[(k + 1) * n..(k + 2) * n];
        let b2 = &bd[(k + 2) * n..(k + 3) * n];
        let b3 = &bd[(k + 3) * n..(k + 4) * n];
        for j in 0..n {
            let mut v = out_row[j];
            v = a0.mul_add(b0[j], v);
            v = a1.mul_add(b1[j], v);
            v = a2.mul_add(b2[j], v);
            v = a3.mul_add(b3[j], v);
            out_row[j] = v;
        }
        k += 4;
    }
    while k < kk {
        axpy(out_row, a_row[k], &bd[k * n..(k + 1) * n]);
        k += 1;
    }
}

/// out += a * b
pub fn matmul_acc<S: Scalar>(out: &mut Tensor<S>, a: &Tensor<S>, b: &Tensor<S>) {
    assert_eq!(a.cols, b.rows, "matmul inner dim {} vs {}", a.cols, b.rows);
    assert_eq!((out.rows, out.cols), (a.rows, b.cols), "matmul out shape");
    let flops = a.rows * a.cols * b.cols;
    if flops >= PAR_FLOP_THRESHOLD && out.rows >= 2 {
        let cols = out.cols;
        out.data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, out_row)| matvec_row_acc(out_row, a.row(i), b));
    } else {
        for i in 0..out.rows {
            let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
            matvec_row_acc(row, a.row(i), b);
        }
    }
}

/// out = a * b
pub fn matmul_into<S: Scalar>(out: &mut Tensor<S>, a: &Tensor<S>, b: &Tensor<S>) {
    out.fill(S::zero());
    matmul_acc(out, a, b);
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(a.rows, b.cols);
    matmul_acc(&mut out, a, b);
    out
}

/// out += a^T * b   (out: a.cols x b.cols)
pub fn matmul_transa_acc<S: Scalar>(out: &mut Tensor<S>, a: &Tensor<S>, b: &Tensor<S>) {
    assert_eq!(a.rows, b.rows, "matmul_transa inner dim");
    assert_eq!((out.rows, out.cols), (a.cols, b.cols), "matmul_transa out");
    let flops = a.rows * a.cols * b.cols;
    if flops >= PAR_FLOP_THRESHOLD && out.rows >= 2 {
        let cols = out.cols;
        let a_cols = a.cols;
        out.data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, out_row)| {
                for i in 0..a.rows {
                    axpy(out_row, a.data[i * a_cols + r], b.row(i));
                }
            });
    } else {
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            for i in 0..a.rows {
                axpy(row, a.data[i * a.cols + r], b.row(i));
            }
        }
    }
}

/// out += a * b^T   (out: a.rows x b.rows)
pub fn matmul_transb_acc<S: Scalar>(out: &mut Tensor<S>, a: &Tensor<S>, b: &Tensor<S>) {
    assert_eq!(a.cols, b.cols, "matmul_transb inner dim");
    assert_eq!((out.rows, out.cols), (a.rows, b.rows), "matmul_transb out");
    let flops = a.rows * a.cols * b.rows;
    if flops >= PAR_FLOP_THRESHOLD && out.rows >= 2 {
        let cols = out.cols;
        out.data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, out_row)| {
                let a_row = a.row(i);
                for (j, o) in out_row.iter_mut().enumerate() {
                    let mut acc = S::zero();
                    for (&av, &bv) in a_row.iter().zip(b.row(j).iter()) {
                        acc = av.mul_add(bv, acc);
                    }
                    *o = *o + acc;
                }
            });
    } else {
        for i in 0..out.rows {
            for j in 0..b.rows {
                let mut acc = S::zero();
                for (&av, &bv) in a.row(i).iter().zip(b.row(j).iter()) {
                    acc = av.mul_add(bv, acc);
                }
                out.data[i * out.cols + j] = out.data[i * out.cols + j] + acc;
            }
        }
    }
}

/// out = x * w for a single row vector, accumulated over `k` in index
/// order. This is exactly one row of [`matmul_into`], so per-episode
/// inference and batched tape forwards agree bit-for-bit.
pub fn matvec_into<S: Scalar>(out: &mut [S], x: &[S], w: &Tensor<S>) {
    assert_eq!(x.len(), w.rows, "matvec inner dim");
    assert_eq!(out.len(), w.cols, "matvec out dim");
    out.iter_mut().for_each(|o| *o = S::zero());
    for (k, &xv) in x.iter().enumerate() {
        axpy(out, xv, w.row(k));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_kernels_match_explicit_transpose() {
        let a: Tensor<f64> = Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let b = Tensor::from_vec(2, 2, vec![2.0, 1.0, -1.0, 0.5]);
        // a^T * b
        let mut out = Tensor::zeros(3, 2);
        matmul_transa_acc(&mut out, &a, &b);
        let at = Tensor::from_vec(3, 2, vec![1.0, 3.0, -2.0, 4.0, 0.5, -1.0]);
        let expect = matmul(&at, &b);
        for (x, y) in out.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // b * a^T would be (2x3); check a * b^T instead.
        let c = Tensor::from_vec(4, 3, vec![1.0; 12]);
        let mut out2 = Tensor::zeros(4, 2);
        matmul_transb_acc(&mut out2, &c, &a);
        for i in 0..4 {
            assert!((out2.get(i, 0) - (1.0 - 2.0 + 0.5)).abs() < 1e-12);
            assert!((out2.get(i, 1) - (3.0 + 4.0 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_matches_serial() {
        // Large enough to cross the parallel threshold (>= 8M MACs).
        let (m, k, n) = (400, 200, 128);
        let a = Tensor::from_vec(m, k, (0..m * k).map(|i| (i % 17) as f64 * 0.1).collect());
        let b = Tensor::from_vec(k, n, (0..k * n).map(|i| (i % 13) as f64 * 0.05).collect());
        let big = matmul(&a, &b);
        // Row-by-row serial reference must agree bit-for-bit.
        for i in 0..m {
            let mut row = vec![0.0; n];
            matvec_row_acc(&mut row, a.row(i), &b);
            assert_eq!(&big.data()[i * n..(i + 1) * n], row.as_slice());
        }
    }
}
