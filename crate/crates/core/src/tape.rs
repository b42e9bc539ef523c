//! Reverse-mode automatic differentiation over small dense arrays.
//!
//! The tape is define-by-run: each batch rebuilds the graph, because the
//! closed-loop unroll has a data-dependent length and ablation-dependent
//! topology. Node ids are topological by construction (an op may only
//! reference ids created before it), which is also what rules out cycles.
//!
//! Forward and backward are pure functions of (parameters, inputs) with a
//! fixed reduction order, so a whole training run is bit-reproducible.

use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    /// Copies its input's data and blocks gradient flow.
    Detach,
    MatMul(Value, Value),
    Add(Value, Value),
    /// (B x F) + (1 x F), broadcast over rows.
    AddRow(Value, Value),
    /// (m x n) + (1 x 1), broadcast everywhere.
    AddScalar(Value, Value),
    SubScalar(Value, Value),
    MulScalar(Value, Value),
    DivScalar(Value, Value),
    Mul(Value, Value),
    AddConst(Value, S),
    MulConst(Value, S),
    DivConst(Value, S),
    OneMinus(Value),
    Tanh(Value),
    Sigmoid(Value),
    Sqrt(Value),
    ClampMin(Value, S),
    MeanAll(Value),
    Softmax(Value),
    /// out[i] = in[i, idx[i]]; one picked column per row.
    GatherCol(Value, Vec<usize>),
    LnClamped(Value, S),
    ConcatCols(Value, Value),
    /// 1x1 view of entry (i, j).
    GetElement(Value, usize, usize),
    /// (B x 1) view of column j.
    SliceCol(Value, usize),
}

struct Node<S> {
    data: Tensor<S>,
    op: Op<S>,
}

/// Recording tape. Single-threaded; spawn one per worker if needed.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Tensor<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Value) -> &Tensor<S> {
        &self.nodes[v.0].data
    }

    /// Gradient of the most recent backward root w.r.t. node `v`.
    pub fn grad(&self, v: Value) -> &Tensor<S> {
        assert!(self.backward_done, "grad() before backward()");
        &self.grads[v.0]
    }

    fn push(&mut self, data: Tensor<S>, op: Op<S>) -> Value {
        self.nodes.push(Node { data, op });
        Value(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Tensor<S>) -> Value {
        self.push(data, Op::Leaf)
    }

    pub fn leaf_from(&mut self, data: &Tensor<S>) -> Value {
        self.leaf(data.clone())
    }

    pub fn scalar(&mut self, v: S) -> Value {
        self.leaf(Tensor::scalar(v))
    }

    pub fn detach(&mut self, a: Value) -> Value {
        let data = self.value(a).clone();
        self.push(data, Op::Detach)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = Tensor::from_vec(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect(),
        );
        self.push(data, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Value, row: Value) -> Value {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row needs a 1 x F addend");
        assert_eq!(ta.cols(), tr.cols(), "add_row width mismatch");
        let mut data = ta.clone();
        for i in 0..data.rows() {
            for (o, &r) in data.row_mut(i).iter_mut().zip(tr.data()) {
                *o = *o + r;
            }
        }
        self.push(data, Op::AddRow(a, row))
    }

    pub fn add_scalar(&mut self, a: Value, s: Value) -> Value {
        assert!(self.value(s).is_scalar(), "add_scalar needs 1x1 addend");
        let sv = self.value(s).item();
        let data = self.value(a).map(|x| x + sv);
        self.push(data, Op::AddScalar(a, s))
    }

    pub fn sub_scalar(&mut self, a: Value, s: Value) -> Value {
        assert!(self.value(s).is_scalar(), "sub_scalar needs 1x1 operand");
        let sv = self.value(s).item();
        let data = self.value(a).map(|x| x - sv);
        self.push(data, Op::SubScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Value, s: Value) -> Value {
        assert!(self.value(s).is_scalar(), "mul_scalar needs 1x1 operand");
        let sv = self.value(s).item();
        let data = self.value(a).map(|x| x * sv);
        self.push(data, Op::MulScalar(a, s))
    }

    pub fn div_scalar(&mut self, a: Value, s: Value) -> Value {
        assert!(self.value(s).is_scalar(), "div_scalar needs 1x1 operand");
        let sv = self.value(s).item();
        let data = self.value(a).map(|x| x / sv);
        self.push(data, Op::DivScalar(a, s))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = Tensor::from_vec(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect(),
        );
        self.push(data, Op::Mul(a, b))
    }

    pub fn add_const(&mut self, a: Value, c: S) -> Value {
        let data = self.value(a).map(|x| x + c);
        self.push(data, Op::AddConst(a, c))
    }

    pub fn mul_const(&mut self, a: Value, c: S) -> Value {
        let data = self.value(a).map(|x| x * c);
        self.push(data, Op::MulConst(a, c))
    }

    pub fn div_const(&mut self, a: Value, c: S) -> Value {
        let data = self.value(a).map(|x| x / c);
        self.push(data, Op::DivConst(a, c))
    }

    pub fn one_minus(&mut self, a: Value) -> Value {
        let data = self.value(a).map(|x| S::one() - x);
        self.push(data, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let data = self.value(a).map(|x| x.tanh());
        self.push(data, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let data = self.value(a).map(stable_sigmoid);
        self.push(data, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        let data = self.value(a).map(|x| x.sqrt());
        self.push(data, Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Value, floor: S) -> Value {
        let data = self.value(a).map(|x| if x > floor { x } else { floor });
        self.push(data, Op::ClampMin(a, floor))
    }

    /// Mean over every entry; result is 1x1.
    pub fn mean_all(&mut self, a: Value) -> Value {
        let t = self.value(a);
        let inv = S::one() / S::from(t.len()).unwrap();
        let sum = t.data().iter().fold(S::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(sum * inv), Op::MeanAll(a))
    }

    /// Row-wise softmax with max subtraction; rows sum to one.
    pub fn softmax(&mut self, a: Value) -> Value {
        let t = self.value(a);
        let mut data = t.clone();
        for i in 0..data.rows() {
            softmax_row(data.row_mut(i));
        }
        self.push(data, Op::Softmax(a))
    }

    /// out[i] = in[i, idx[i]] as a (B x 1) column.
    pub fn gather_col(&mut self, a: Value, idx: Vec<usize>) -> Value {
        let t = self.value(a);
        assert_eq!(idx.len(), t.rows(), "gather_col index count");
        let data = Tensor::from_vec(
            t.rows(),
            1,
            idx.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect(),
        );
        self.push(data, Op::GatherCol(a, idx))
    }

    /// ln(max(x, floor)); the clamp keeps the loss finite on saturated
    /// probabilities.
    pub fn ln_clamped(&mut self, a: Value, floor: S) -> Value {
        let data = self.value(a).map(|x| if x > floor { x.ln() } else { floor.ln() });
        self.push(data, Op::LnClamped(a, floor))
    }

    pub fn concat_cols(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows(), "concat_cols row mismatch");
        let rows = ta.rows();
        let cols = ta.cols() + tb.cols();
        let mut data = Tensor::zeros(rows, cols);
        for i in 0..rows {
            data.row_mut(i)[..ta.cols()].copy_from_slice(ta.row(i));
            data.row_mut(i)[ta.cols()..].copy_from_slice(tb.row(i));
        }
        self.push(data, Op::ConcatCols(a, b))
    }

    pub fn get_element(&mut self, a: Value, i: usize, j: usize) -> Value {
        let v = self.value(a).get(i, j);
        self.push(Tensor::scalar(v), Op::GetElement(a, i, j))
    }

    pub fn slice_col(&mut self, a: Value, j: usize) -> Value {
        let t = self.value(a);
        assert!(j < t.cols(), "slice_col out of range");
        let data = Tensor::from_vec(t.rows(), 1, (0..t.rows()).map(|i| t.get(i, j)).collect());
        self.push(data, Op::SliceCol(a, j))
    }

    /// Propagates d(root)/d(node) to every node on the tape.
    ///
    /// The root must be scalar (1x1); calling backward twice on the same
    /// tape is an error since gradients would silently double-accumulate.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward() called twice on the same tape".into(),
            ));
        }
        if !self.nodes[root.0].data.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].data.shape()
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.data.rows(), n.data.cols()))
            .collect();
        self.grads[root.0].set(0, 0, S::one());

        for out in (0..=root.0).rev() {
            self.backprop_node(out);
        }
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&mut self, out: usize) {
        // Reverse topological order guarantees inputs have smaller ids, so
        // the grads slice can always be split at `out`.
        let (lo, hi) = self.grads.split_at_mut(out);
        let go = &hi[0];
        if go.data().iter().all(|&g| g == S::zero()) {
            return;
        }
        match &self.nodes[out].op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (da_needed, db_needed) = (a.0, b.0);
                tensor::matmul_transb_acc(&mut lo[da_needed], go, &self.nodes[b.0].data);
                tensor::matmul_transa_acc(&mut lo[db_needed], &self.nodes[a.0].data, go);
            }
            Op::Add(a, b) => {
                acc(&mut lo[a.0], go.data());
                acc(&mut lo[b.0], go.data());
            }
            Op::AddRow(a, row) => {
                acc(&mut lo[a.0], go.data());
                let gr = &mut lo[row.0];
                let cols = gr.cols();
                for i in 0..go.rows() {
                    for (g, &v) in gr.data_mut()[..cols].iter_mut().zip(go.row(i)) {
                        *g = *g + v;
                    }
                }
            }
            Op::AddScalar(a, s) => {
                acc(&mut lo[a.0], go.data());
                let total = go.data().iter().fold(S::zero(), |acc, &g| acc + g);
                let gs = &mut lo[s.0];
                gs.set(0, 0, gs.item() + total);
            }
            Op::SubScalar(a, s) => {
                acc(&mut lo[a.0], go.data());
                let total = go.data().iter().fold(S::zero(), |acc, &g| acc + g);
                let gs = &mut lo[s.0];
                gs.set(0, 0, gs.item() - total);
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[s.0].data.item();
                let ad = self.nodes[a.0].data.data();
                let dot = go
                    .data()
                    .iter()
                    .zip(ad)
                    .fold(S::zero(), |acc, (&g, &x)| g.mul_add(x, acc));
                for (g, &v) in lo[a.0].data_mut().iter_mut().zip(go.data()) {
                    *g = v.mul_add(sv, *g);
                }
                let gs = &mut lo[s.0];
                gs.set(0, 0, gs.item() + dot);
            }
            Op::DivScalar(a, s) => {
                let sv = self.nodes[s.0].data.item();
                let outd = self.nodes[out].data.data();
                let dot = go
                    .data()
                    .iter()
                    .zip(outd)
                    .fold(S::zero(), |acc, (&g, &o)| g.mul_add(o, acc));
                for (g, &v) in lo[a.0].data_mut().iter_mut().zip(go.data()) {
                    *g = *g + v / sv;
                }
                let gs = &mut lo[s.0];
                gs.set(0, 0, gs.item() - dot / sv);
            }
            Op::Mul(a, b) => {
                let (ai, bi) = (a.0, b.0);
                {
                    let bd: Vec<S> = self.nodes[bi].data.data().to_vec();
                    for ((g, &v), &x) in lo[ai].data_mut().iter_mut().zip(go.data()).zip(&bd) {
                        *g = v.mul_add(x, *g);
                    }
                }
                {
                    let ad: Vec<S> = self.nodes[ai].data.data().to_vec();
                    for ((g, &v), &x) in lo[bi].data_mut().iter_mut().zip(go.data()).zip(&ad) {
                        *g = v.mul_add(x, *g);
                    }
                }
            }
            Op::AddConst(a, _) => acc(&mut lo[a.0], go.data()),
            Op::MulConst(a, c) => {
                let c = *c;
                for (g, &v) in lo[a.0].data_mut().iter_mut().zip(go.data()) {
                    *g = v.mul_add(c, *g);
                }
            }
            Op::DivConst(a, c) => {
                let c = *c;
                for (g, &v) in lo[a.0].data_mut().iter_mut().zip(go.data()) {
                    *g = *g + v / c;
                }
            }
            Op::OneMinus(a) => {
                for (g, &v) in lo[a.0].data_mut().iter_mut().zip(go.data()) {
                    *g = *g - v;
                }
            }
            Op::Tanh(a) => {
                let outd = self.nodes[out].data.data();
                for ((g, &v), &o) in lo[a.0].data_mut().iter_mut().zip(go.data()).zip(outd) {
                    *g = (v * (S::one() - o * o)) + *g;
                }
            }
            Op::Sigmoid(a) => {
                let outd = self.nodes[out].data.data();
                for ((g, &v), &o) in lo[a.0].data_mut().iter_mut().zip(go.data()).zip(outd) {
                    *g = (v * o * (S::one() - o)) + *g;
                }
            }
            Op::Sqrt(a) => {
                let outd = self.nodes[out].data.data();
                let two = S::one() + S::one();
                for ((g, &v), &o) in lo[a.0].data_mut().iter_mut().zip(go.data()).zip(outd) {
                    *g = *g + v / (two * o);
                }
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let ad = self.nodes[a.0].data.data();
                for ((g, &v), &x) in lo[a.0].data_mut().iter_mut().zip(go.data()).zip(ad) {
                    if x > floor {
                        *g = *g + v;
                    }
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].data.len();
                let g = go.item() / S::from(n).unwrap();
                for ga in lo[a.0].data_mut().iter_mut() {
                    *ga = *ga + g;
                }
            }
            Op::Softmax(a) => {
                let p = &self.nodes[out].data;
                let ga = &mut lo[a.0];
                for i in 0..p.rows() {
                    let prow = p.row(i);
                    let grow = go.row(i);
                    let dot = grow
                        .iter()
                        .zip(prow)
                        .fold(S::zero(), |acc, (&g, &pv)| g.mul_add(pv, acc));
                    for ((g, &pv), &gv) in ga.row_mut(i).iter_mut().zip(prow).zip(grow) {
                        *g = *g + pv * (gv - dot);
                    }
                }
            }
            Op::GatherCol(a, idx) => {
                let ga = &mut lo[a.0];
                for (i, &j) in idx.iter().enumerate() {
                    let cur = ga.get(i, j);
                    ga.set(i, j, cur + go.get(i, 0));
                }
            }
            Op::LnClamped(a, floor) => {
                let floor = *floor;
                let ad = self.nodes[a.0].data.data();
                for ((g, &v), &x) in lo[a.0].data_mut().iter_mut().zip(go.data()).zip(ad) {
                    if x > floor {
                        *g = *g + v / x;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let a_cols = self.nodes[a.0].data.cols();
                let (ai, bi) = (a.0, b.0);
                for i in 0..go.rows() {
                    let grow = go.row(i);
                    for (g, &v) in lo[ai].row_mut(i).iter_mut().zip(&grow[..a_cols]) {
                        *g = *g + v;
                    }
                    for (g, &v) in lo[bi].row_mut(i).iter_mut().zip(&grow[a_cols..]) {
                        *g = *g + v;
                    }
                }
            }
            Op::GetElement(a, i, j) => {
                let ga = &mut lo[a.0];
                let cur = ga.get(*i, *j);
                ga.set(*i, *j, cur + go.item());
            }
            Op::SliceCol(a, j) => {
                let ga = &mut lo[a.0];
                for i in 0..go.rows() {
                    let cur = ga.get(i, *j);
                    ga.set(i, *j, cur + go.get(i, 0));
                }
            }
        }
    }
}

#[inline]
fn acc<S: Scalar>(dst: &mut Tensor<S>, src: &[S]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// In-place softmax of one row: max subtraction plus a compensated sum so
/// the outputs sum to one within 1e-12 even for wide rows.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    let mut comp = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        // Kahan step.
        let y = *v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.scalar(3.0);
        let y = tape.mul(p, p);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(p).item(), 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.scalar(0.0);
        let y = tape.tanh(p);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(p).item(), 1.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.scalar(2.0);
        let y = tape.mul(p, p);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::row_vec(vec![1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut row = vec![0.0_f64; 64];
        softmax_row(&mut row);
        for &p in &row {
            assert_eq!(p, 1.0 / 64.0);
        }
        let mut row = vec![50.0, 0.0, 0.0];
        softmax_row(&mut row);
        // With a gap of 50 the runner-up mass is ~2e-22.
        assert!(row[0] >= 1.0 - 1e-20);
        assert!(row[1] < 1e-20 && row[2] < 1e-20);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let logits = vec![0.3, -1.2, 2.5, 0.0, 0.9, -0.4, 1.1, -2.0];
        let mut a = logits.clone();
        softmax_row(&mut a);
        let mut b: Vec<f64> = logits.iter().map(|x| x + 123.456).collect();
        softmax_row(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.scalar(2.0);
        let d = tape.detach(p);
        let y = tape.mul(d, p); // dy/dp through the live path only: d = 2
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(p).item(), 2.0);
        assert_eq!(tape.value(y).item(), 4.0);
    }

    #[test]
    fn mean_all_and_gather() {
        let mut tape: Tape<f64> = Tape::new();
        let m = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let picked = tape.gather_col(m, vec![1, 0]);
        let mean = tape.mean_all(picked);
        tape.backward(mean).unwrap();
        assert_eq!(tape.value(mean).item(), 2.5); // (2 + 3) / 2
        assert_eq!(tape.grad(m).data(), &[0.0, 0.5, 0.5, 0.0]);
    }
}
