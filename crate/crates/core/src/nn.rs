//! Gated recurrent unit cell and parameter initialization.
//!
//! Gate equations (frozen here so every test is well-defined):
//!
//! ```text
//! r  = sigmoid(x W_r + h U_r + b_r)
//! u  = sigmoid(x W_u + h U_u + b_u)
//! c  = tanh  (x W_c + (r . h) U_c + b_c)
//! h' = (1 - u) . h + u . c
//! ```
//!
//! The cell exists in two forms that compute the identical arithmetic in
//! the identical order: a tape builder for training ([`gru_cell_step`])
//! and an allocation-free per-row step for evaluation ([`GruCell::step`]).

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{stable_sigmoid, Tape, Value};
use crate::tensor::{matvec_into, Tensor};

/// Uniform init U(-half, half) drawn row-major from `rng`.
pub fn init_uniform<S: Scalar>(
    rows: usize,
    cols: usize,
    half_range: f64,
    rng: &mut RngStream,
) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::from(half_range * (2.0 * rng.next_uniform() - 1.0)).unwrap())
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Trainable parameters of one GRU cell. Weight matrices are stored
/// input-major: `w_*` is (input x hidden), `u_*` is (hidden x hidden),
/// biases are (1 x hidden).
#[derive(Clone, Debug)]
pub struct GruCell<S> {
    pub w_r: Tensor<S>,
    pub u_r: Tensor<S>,
    pub b_r: Tensor<S>,
    pub w_u: Tensor<S>,
    pub u_u: Tensor<S>,
    pub b_u: Tensor<S>,
    pub w_c: Tensor<S>,
    pub u_c: Tensor<S>,
    pub b_c: Tensor<S>,
}

pub const GRU_PARAM_NAMES: [&str; 9] = [
    "w_r", "u_r", "b_r", "w_u", "u_u", "b_u", "w_c", "u_c", "b_c",
];

impl<S: Scalar> GruCell<S> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCell {
            w_r: Tensor::zeros(input, hidden),
            u_r: Tensor::zeros(hidden, hidden),
            b_r: Tensor::zeros(1, hidden),
            w_u: Tensor::zeros(input, hidden),
            u_u: Tensor::zeros(hidden, hidden),
            b_u: Tensor::zeros(1, hidden),
            w_c: Tensor::zeros(input, hidden),
            u_c: Tensor::zeros(hidden, hidden),
            b_c: Tensor::zeros(1, hidden),
        }
    }

    /// Every entry U(-1/sqrt(hidden), 1/sqrt(hidden)).
    pub fn init(input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let half = 1.0 / (hidden as f64).sqrt();
        GruCell {
            w_r: init_uniform(input, hidden, half, rng),
            u_r: init_uniform(hidden, hidden, half, rng),
            b_r: init_uniform(1, hidden, half, rng),
            w_u: init_uniform(input, hidden, half, rng),
            u_u: init_uniform(hidden, hidden, half, rng),
            b_u: init_uniform(1, hidden, half, rng),
            w_c: init_uniform(input, hidden, half, rng),
            u_c: init_uniform(hidden, hidden, half, rng),
            b_c: init_uniform(1, hidden, half, rng),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_r.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_r.cols()
    }

    pub fn params(&self) -> [&Tensor<S>; 9] {
        [
            &self.w_r, &self.u_r, &self.b_r, &self.w_u, &self.u_u, &self.b_u, &self.w_c,
            &self.u_c, &self.b_c,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<S>; 9] {
        [
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_u,
            &mut self.u_u,
            &mut self.b_u,
            &mut self.w_c,
            &mut self.u_c,
            &mut self.b_c,
        ]
    }

    /// One inference step; `h_out` may not alias `h_prev`.
    pub fn step(&self, x: &[S], h_prev: &[S], scratch: &mut GruScratch<S>, h_out: &mut [S]) {
        let h = self.hidden_size();
        assert_eq!(x.len(), self.input_size(), "gru input dim");
        assert_eq!(h_prev.len(), h, "gru hidden dim");
        assert_eq!(h_out.len(), h, "gru output dim");
        scratch.resize(h);

        gate(&mut scratch.r, x, &self.w_r, h_prev, &self.u_r, &self.b_r, &mut scratch.tmp);
        scratch.r.iter_mut().for_each(|v| *v = stable_sigmoid(*v));
        gate(&mut scratch.u, x, &self.w_u, h_prev, &self.u_u, &self.b_u, &mut scratch.tmp);
        scratch.u.iter_mut().for_each(|v| *v = stable_sigmoid(*v));

        for ((rh, &r), &hp) in scratch.rh.iter_mut().zip(&scratch.r).zip(h_prev) {
            *rh = r * hp;
        }
        gate(&mut scratch.c, x, &self.w_c, &scratch.rh, &self.u_c, &self.b_c, &mut scratch.tmp);
        scratch.c.iter_mut().for_each(|v| *v = v.tanh());

        for (((o, &u), &c), &hp) in h_out.iter_mut().zip(&scratch.u).zip(&scratch.c).zip(h_prev) {
            let om = S::one() - u;
            *o = (om * hp) + (u * c);
        }
    }
}

/// pre = (x W + h U) + b, matching the tape op order exactly.
fn gate<S: Scalar>(
    pre: &mut [S],
    x: &[S],
    w: &Tensor<S>,
    h: &[S],
    u: &Tensor<S>,
    b: &Tensor<S>,
    tmp: &mut Vec<S>,
) {
    matvec_into(pre, x, w);
    tmp.resize(pre.len(), S::zero());
    matvec_into(tmp, h, u);
    for ((p, &t), &bv) in pre.iter_mut().zip(tmp.iter()).zip(b.data()) {
        *p = (*p + t) + bv;
    }
}

/// Reusable buffers for [`GruCell::step`].
#[derive(Clone, Debug, Default)]
pub struct GruScratch<S> {
    r: Vec<S>,
    u: Vec<S>,
    c: Vec<S>,
    rh: Vec<S>,
    tmp: Vec<S>,
}

impl<S: Scalar> GruScratch<S> {
    pub fn new() -> Self {
        GruScratch {
            r: Vec::new(),
            u: Vec::new(),
            c: Vec::new(),
            rh: Vec::new(),
            tmp: Vec::new(),
        }
    }

    fn resize(&mut self, h: usize) {
        self.r.resize(h, S::zero());
        self.u.resize(h, S::zero());
        self.c.resize(h, S::zero());
        self.rh.resize(h, S::zero());
    }
}

/// Tape handles for one bound GRU cell.
#[derive(Clone, Copy, Debug)]
pub struct GruCellNodes {
    pub w_r: Value,
    pub u_r: Value,
    pub b_r: Value,
    pub w_u: Value,
    pub u_u: Value,
    pub b_u: Value,
    pub w_c: Value,
    pub u_c: Value,
    pub b_c: Value,
}

impl GruCellNodes {
    pub fn values(&self) -> [Value; 9] {
        [
            self.w_r, self.u_r, self.b_r, self.w_u, self.u_u, self.b_u, self.w_c, self.u_c,
            self.b_c,
        ]
    }
}

pub fn bind_gru<S: Scalar>(tape: &mut Tape<S>, cell: &GruCell<S>) -> GruCellNodes {
    GruCellNodes {
        w_r: tape.leaf_from(&cell.w_r),
        u_r: tape.leaf_from(&cell.u_r),
        b_r: tape.leaf_from(&cell.b_r),
        w_u: tape.leaf_from(&cell.w_u),
        u_u: tape.leaf_from(&cell.u_u),
        b_u: tape.leaf_from(&cell.b_u),
        w_c: tape.leaf_from(&cell.w_c),
        u_c: tape.leaf_from(&cell.u_c),
        b_c: tape.leaf_from(&cell.b_c),
    }
}

/// Differentiable GRU step on a batch: `x` is (B x input), `h_prev` is
/// (B x hidden); returns the next hidden state (B x hidden).
pub fn gru_cell_step<S: Scalar>(
    tape: &mut Tape<S>,
    x: Value,
    h_prev: Value,
    cell: &GruCellNodes,
) -> Value {
    let pre_r = gate_pre(tape, x, cell.w_r, h_prev, cell.u_r, cell.b_r);
    let r = tape.sigmoid(pre_r);
    let pre_u = gate_pre(tape, x, cell.w_u, h_prev, cell.u_u, cell.b_u);
    let u = tape.sigmoid(pre_u);
    let rh = tape.mul(r, h_prev);
    let pre_c = gate_pre(tape, x, cell.w_c, rh, cell.u_c, cell.b_c);
    let c = tape.tanh(pre_c);
    let om = tape.one_minus(u);
    let keep = tape.mul(om, h_prev);
    let new = tape.mul(u, c);
    tape.add(keep, new)
}

fn gate_pre<S: Scalar>(
    tape: &mut Tape<S>,
    x: Value,
    w: Value,
    h: Value,
    u: Value,
    b: Value,
) -> Value {
    let xw = tape.matmul(x, w);
    let hu = tape.matmul(h, u);
    let s = tape.add(xw, hu);
    tape.add_row(s, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cell_maps_to_zero() {
        let cell: GruCell<f64> = GruCell::zeros(3, 4);
        let mut scratch = GruScratch::new();
        let mut h = vec![999.0; 4];
        cell.step(&[0.3, -0.8, 1.5], &[0.0; 4], &mut scratch, &mut h);
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let mut cell: GruCell<f64> = GruCell::init(3, 4, &mut RngStream::new(1, 0));
        cell.b_u.fill(-50.0); // u ~ 0 regardless of input
        cell.w_u.fill(0.0);
        cell.u_u.fill(0.0);
        let h_prev = vec![0.7, -0.2, 0.05, 1.3];
        let mut scratch = GruScratch::new();
        let mut h = vec![0.0; 4];
        cell.step(&[0.5, 0.1, -0.9], &h_prev, &mut scratch, &mut h);
        for (a, b) in h.iter().zip(&h_prev) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn tape_and_inference_steps_agree_bitwise() {
        let cell: GruCell<f64> = GruCell::init(3, 4, &mut RngStream::new(9, 0));
        let x = vec![0.25, -1.5, 0.75];
        let h_prev = vec![0.1, 0.2, -0.3, 0.4];

        let mut scratch = GruScratch::new();
        let mut h_inf = vec![0.0; 4];
        cell.step(&x, &h_prev, &mut scratch, &mut h_inf);

        let mut tape: Tape<f64> = Tape::new();
        let nodes = bind_gru(&mut tape, &cell);
        let xv = tape.leaf(Tensor::row_vec(x));
        let hv = tape.leaf(Tensor::row_vec(h_prev));
        let out = gru_cell_step(&mut tape, xv, hv, &nodes);
        assert_eq!(tape.value(out).data(), h_inf.as_slice());
    }
}
