//! Attention decoder: stacked bi-directional GRUs over the receive
//! sequence, a weighted merge of the per-timestep states, and a softmax
//! (blockwise, M = 2^K classes) or sigmoid (bitwise, M = K) output head.

use crate::nn::{GruCell, GruScratch};
use crate::scalar::Scalar;
use crate::tape::{softmax_row, stable_sigmoid};
use crate::tensor::{matvec_into, Tensor};
use crate::{Error, Result};

/// 2^K classes with a softmax head is capped here; beyond K = 16 the
/// one-hot head is no longer a sensible parameterization.
pub const MAX_SOFTMAX_BITS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Bi,
    Uni,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderHead {
    /// Blockwise classification over all 2^K messages.
    Softmax,
    /// Per-bit probabilities, trained with binary cross-entropy.
    Sigmoid,
}

/// Strategies for merging the per-timestep GRU states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeCase {
    /// Case 1: only the step-N states (both directions).
    LastStates,
    /// Case 2: forward step N, backward step 1.
    EndStates,
    /// Case 3: unweighted sum over all steps.
    UniformSum,
    /// Case 4: one trainable weight per step, shared by both directions.
    SharedAttention,
    /// Case 5 (default): 2N independent trainable weights.
    FullAttention,
}

impl MergeCase {
    pub fn id(self) -> u8 {
        match self {
            MergeCase::LastStates => 1,
            MergeCase::EndStates => 2,
            MergeCase::UniformSum => 3,
            MergeCase::SharedAttention => 4,
            MergeCase::FullAttention => 5,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            1 => MergeCase::LastStates,
            2 => MergeCase::EndStates,
            3 => MergeCase::UniformSum,
            4 => MergeCase::SharedAttention,
            5 => MergeCase::FullAttention,
            _ => return Err(Error::InvalidParam(format!("unknown merge case {id}"))),
        })
    }

    pub fn trainable(self) -> bool {
        matches!(self, MergeCase::SharedAttention | MergeCase::FullAttention)
    }

    /// Fixed weight for step `k` (0-based) out of `n`, forward direction.
    pub(crate) fn fixed_weight_fwd<S: Scalar>(self, k: usize, n: usize) -> S {
        match self {
            MergeCase::LastStates | MergeCase::EndStates => {
                if k == n - 1 {
                    S::one()
                } else {
                    S::zero()
                }
            }
            MergeCase::UniformSum => S::one(),
            _ => unreachable!("trainable case has no fixed weights"),
        }
    }

    /// Fixed weight for step `k` (0-based), backward direction.
    pub(crate) fn fixed_weight_bwd<S: Scalar>(self, k: usize, n: usize) -> S {
        match self {
            MergeCase::LastStates => {
                if k == n - 1 {
                    S::one()
                } else {
                    S::zero()
                }
            }
            MergeCase::EndStates => {
                if k == 0 {
                    S::one()
                } else {
                    S::zero()
                }
            }
            MergeCase::UniformSum => S::one(),
            _ => unreachable!("trainable case has no fixed weights"),
        }
    }
}

/// Decoder parameters and configuration.
///
/// In `Uni` mode the backward stack is empty and only the forward
/// attention weights exist; the head input is then H wide instead of 2H.
#[derive(Clone, Debug)]
pub struct DecoderModel<S> {
    pub fwd: Vec<GruCell<S>>,
    pub bwd: Vec<GruCell<S>>,
    /// 1xN forward attention weights (also the shared weights in Case 4).
    pub attn_f: Tensor<S>,
    /// 1xN backward attention weights (unused in Uni mode).
    pub attn_b: Tensor<S>,
    /// Output weights, (head_input x M) with M = 2^K or K.
    pub w_d: Tensor<S>,
    /// Output bias, 1xM.
    pub v_d: Tensor<S>,
    pub head: DecoderHead,
    pub direction: Direction,
    pub merge_case: MergeCase,
    pub k_bits: usize,
    pub n_uses: usize,
}

impl<S: Scalar> DecoderModel<S> {
    pub fn init(
        k_bits: usize,
        n_uses: usize,
        layers: usize,
        hidden: usize,
        direction: Direction,
        merge_case: MergeCase,
        head: DecoderHead,
        rng: &mut crate::rng::RngStream,
    ) -> Result<Self> {
        assert!(layers >= 1, "decoder needs at least one GRU layer");
        if head == DecoderHead::Softmax && k_bits > MAX_SOFTMAX_BITS {
            return Err(Error::InvalidParam(format!(
                "softmax head limited to K <= {MAX_SOFTMAX_BITS}, got K = {k_bits}"
            )));
        }
        let gru_stack = |rng: &mut crate::rng::RngStream| -> Vec<GruCell<S>> {
            (0..layers)
                .map(|l| {
                    let input = if l == 0 { 1 } else { hidden };
                    GruCell::init(input, hidden, rng)
                })
                .collect()
        };
        let fwd = gru_stack(rng);
        let bwd = match direction {
            Direction::Bi => gru_stack(rng),
            Direction::Uni => Vec::new(),
        };
        let m = match head {
            DecoderHead::Softmax => 1usize << k_bits,
            DecoderHead::Sigmoid => k_bits,
        };
        let head_input = match direction {
            Direction::Bi => 2 * hidden,
            Direction::Uni => hidden,
        };
        let half = 1.0 / (head_input as f64).sqrt();
        Ok(DecoderModel {
            fwd,
            bwd,
            attn_f: Tensor::filled(1, n_uses, S::one()),
            attn_b: Tensor::filled(1, n_uses, S::one()),
            w_d: crate::nn::init_uniform(head_input, m, half, rng),
            v_d: crate::nn::init_uniform(1, m, half, rng),
            head,
            direction,
            merge_case,
            k_bits,
            n_uses,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.fwd[0].hidden_size()
    }

    pub fn class_count(&self) -> usize {
        self.w_d.cols()
    }

    /// (name, tensor) pairs of trainable arrays in canonical order.
    pub fn trainable(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (l, g) in self.fwd.iter().enumerate() {
            for (name, t) in crate::nn::GRU_PARAM_NAMES.iter().zip(g.params()) {
                out.push((format!("dec.f{l}.{name}"), t));
            }
        }
        for (l, g) in self.bwd.iter().enumerate() {
            for (name, t) in crate::nn::GRU_PARAM_NAMES.iter().zip(g.params()) {
                out.push((format!("dec.b{l}.{name}"), t));
            }
        }
        if self.merge_case.trainable() {
            out.push(("dec.attn_f".into(), &self.attn_f));
            if self.direction == Direction::Bi && self.merge_case == MergeCase::FullAttention {
                out.push(("dec.attn_b".into(), &self.attn_b));
            }
        }
        out.push(("dec.w_d".into(), &self.w_d));
        out.push(("dec.v_d".into(), &self.v_d));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let attn_trainable = self.merge_case.trainable();
        let attn_b_separate =
            self.direction == Direction::Bi && self.merge_case == MergeCase::FullAttention;
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        for g in self.fwd.iter_mut() {
            out.extend(g.params_mut());
        }
        for g in self.bwd.iter_mut() {
            out.extend(g.params_mut());
        }
        if attn_trainable {
            out.push(&mut self.attn_f);
            if attn_b_separate {
                out.push(&mut self.attn_b);
            }
        }
        out.push(&mut self.w_d);
        out.push(&mut self.v_d);
        out
    }

    /// Runs the GRU stacks over the receive vector. Returns last-layer
    /// state sequences: `fwd[k]` computed k = 1..N with zero init, and for
    /// bi-directional models `bwd[k]` computed k = N..1 with zero init
    /// (`bwd` is empty in Uni mode).
    pub fn run_bigru(&self, y: &[S]) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
        assert_eq!(y.len(), self.n_uses, "receive vector length");
        let fwd = run_stack(&self.fwd, y, false);
        let bwd = match self.direction {
            Direction::Bi => run_stack(&self.bwd, y, true),
            Direction::Uni => Vec::new(),
        };
        (fwd, bwd)
    }

    /// Attention merge of the state sequences into the head input r_att.
    pub fn merge_states(&self, fwd: &[Vec<S>], bwd: &[Vec<S>]) -> Vec<S> {
        let n = self.n_uses;
        let h = self.hidden_size();
        assert_eq!(fwd.len(), n, "forward state count");
        // Accumulated as acc + (w * s), the same two-rounding order the
        // training tape uses, so both paths agree exactly.
        let mut r_f = vec![S::zero(); h];
        for k in 0..n {
            let w = self.merge_weight_fwd(k, n);
            for (acc, &s) in r_f.iter_mut().zip(&fwd[k]) {
                *acc = *acc + w * s;
            }
        }
        if self.direction == Direction::Uni {
            return r_f;
        }
        assert_eq!(bwd.len(), n, "backward state count");
        let mut r_b = vec![S::zero(); h];
        for k in 0..n {
            let w = self.merge_weight_bwd(k, n);
            for (acc, &s) in r_b.iter_mut().zip(&bwd[k]) {
                *acc = *acc + w * s;
            }
        }
        r_f.extend_from_slice(&r_b);
        r_f
    }

    pub(crate) fn merge_weight_fwd(&self, k: usize, n: usize) -> S {
        if self.merge_case.trainable() {
            self.attn_f.get(0, k)
        } else {
            self.merge_case.fixed_weight_fwd(k, n)
        }
    }

    pub(crate) fn merge_weight_bwd(&self, k: usize, n: usize) -> S {
        match self.merge_case {
            MergeCase::FullAttention => self.attn_b.get(0, k),
            MergeCase::SharedAttention => self.attn_f.get(0, k),
            fixed => fixed.fixed_weight_bwd(k, n),
        }
    }

    /// Full decode pass: probabilities over 2^K messages (softmax head)
    /// or K per-bit probabilities (sigmoid head).
    pub fn decode(&self, y: &[S]) -> Result<Vec<S>> {
        if y.len() != self.n_uses {
            return Err(Error::Mismatch(format!(
                "receive vector has {} uses but decoder N = {}",
                y.len(),
                self.n_uses
            )));
        }
        let (fwd, bwd) = self.run_bigru(y);
        let r_att = self.merge_states(&fwd, &bwd);
        let mut logits = vec![S::zero(); self.class_count()];
        matvec_into(&mut logits, &r_att, &self.w_d);
        for (l, &b) in logits.iter_mut().zip(self.v_d.data()) {
            *l = *l + b;
        }
        match self.head {
            DecoderHead::Softmax => softmax_row(&mut logits),
            DecoderHead::Sigmoid => logits.iter_mut().for_each(|v| *v = stable_sigmoid(*v)),
        }
        Ok(logits)
    }

    /// Hard decision: softmax head takes the argmax class (ties to the
    /// lower index) and expands it MSB-first; sigmoid head thresholds each
    /// bit at 0.5 (exactly 0.5 decides 0).
    pub fn harden(&self, d_hat: &[S]) -> Vec<u8> {
        match self.head {
            DecoderHead::Softmax => {
                let idx = argmax(d_hat);
                index_to_bits(idx, self.k_bits)
            }
            DecoderHead::Sigmoid => d_hat
                .iter()
                .map(|&p| if p > S::from(0.5).unwrap() { 1 } else { 0 })
                .collect(),
        }
    }
}

fn run_stack<S: Scalar>(stack: &[GruCell<S>], y: &[S], reverse: bool) -> Vec<Vec<S>> {
    let n = y.len();
    let hidden = stack[0].hidden_size();
    let mut scratch = GruScratch::new();
    let mut states: Vec<Vec<S>> = stack.iter().map(|_| vec![S::zero(); hidden]).collect();
    let mut next = vec![S::zero(); hidden];
    let mut carry = vec![S::zero(); hidden];
    let mut out = vec![vec![S::zero(); hidden]; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for k in order {
        let input = [y[k]];
        for (l, cell) in stack.iter().enumerate() {
            if l == 0 {
                cell.step(&input, &states[l], &mut scratch, &mut next);
            } else {
                cell.step(&carry, &states[l], &mut scratch, &mut next);
            }
            states[l].copy_from_slice(&next);
            carry.copy_from_slice(&next);
        }
        out[k].copy_from_slice(&carry);
    }
    out
}

/// Index of the maximum entry; ties resolve to the lower index.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Unsigned integer whose MSB-first binary expansion equals the bits.
pub fn bits_to_index(b: &[u8]) -> usize {
    b.iter().fold(0usize, |acc, &bit| (acc << 1) | bit as usize)
}

/// MSB-first binary expansion of `idx` to `k` bits.
pub fn index_to_bits(idx: usize, k: usize) -> Vec<u8> {
    (0..k).map(|i| ((idx >> (k - 1 - i)) & 1) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn small_model(head: DecoderHead, dir: Direction, case: MergeCase) -> DecoderModel<f64> {
        DecoderModel::init(3, 5, 2, 4, dir, case, head, &mut RngStream::new(77, 0)).unwrap()
    }

    #[test]
    fn bit_index_conventions() {
        assert_eq!(index_to_bits(0, 3), vec![0, 0, 0]);
        assert_eq!(index_to_bits(5, 3), vec![1, 0, 1]);
        assert_eq!(bits_to_index(&[1, 0, 1]), 5);
        assert_eq!(bits_to_index(&index_to_bits(11, 4)), 11);
    }

    #[test]
    fn harden_anchors() {
        let m = small_model(DecoderHead::Softmax, Direction::Bi, MergeCase::FullAttention);
        let mut one_hot = vec![0.0; 8];
        one_hot[0] = 1.0;
        assert_eq!(m.harden(&one_hot), vec![0, 0, 0]);
        let mut one_hot = vec![0.0; 8];
        one_hot[5] = 1.0;
        assert_eq!(m.harden(&one_hot), vec![1, 0, 1]);

        let m = small_model(DecoderHead::Sigmoid, Direction::Bi, MergeCase::FullAttention);
        assert_eq!(m.harden(&[0.9, 0.2, 0.5]), vec![1, 0, 0]);
    }

    #[test]
    fn zero_parameters_give_flat_outputs() {
        let mut m = small_model(DecoderHead::Softmax, Direction::Bi, MergeCase::FullAttention);
        m.w_d.fill(0.0);
        m.v_d.fill(0.0);
        let y = vec![0.3, -0.7, 1.1, 0.0, -0.2];
        let d = m.decode(&y).unwrap();
        for &p in &d {
            assert_eq!(p, 1.0 / 8.0);
        }
        let mut m = small_model(DecoderHead::Sigmoid, Direction::Bi, MergeCase::FullAttention);
        m.w_d.fill(0.0);
        m.v_d.fill(0.0);
        let d = m.decode(&y).unwrap();
        assert_eq!(d, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_gru_parameters_give_zero_states() {
        let mut m = small_model(DecoderHead::Softmax, Direction::Bi, MergeCase::FullAttention);
        for g in m.fwd.iter_mut().chain(m.bwd.iter_mut()) {
            for t in g.params_mut() {
                t.fill(0.0);
            }
        }
        let (fwd, bwd) = m.run_bigru(&[1.0, -2.0, 0.5, 0.0, 3.0]);
        assert!(fwd.iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(bwd.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tied_parameters_make_backward_a_reversed_forward() {
        let mut m = small_model(DecoderHead::Softmax, Direction::Bi, MergeCase::FullAttention);
        m.bwd = m.fwd.clone();
        let y = vec![0.8, -0.1, 0.4, 1.5, -0.9];
        let (fwd, bwd) = m.run_bigru(&y);
        let y_rev: Vec<f64> = y.iter().rev().cloned().collect();
        let (fwd_of_rev, _) = m.run_bigru(&y_rev);
        for k in 0..y.len() {
            // bwd state at step k equals fwd state of the reversed input
            // at the mirrored position.
            assert_eq!(bwd[k], fwd_of_rev[y.len() - 1 - k]);
        }
        drop(fwd);
    }

    #[test]
    fn merge_case_masks() {
        let n = 5;
        let mut m = small_model(DecoderHead::Softmax, Direction::Bi, MergeCase::UniformSum);
        // Case 3 with all states equal to v sums to N*v.
        let v = vec![0.5, -1.0, 0.25, 2.0];
        let states = vec![v.clone(); n];
        let merged = m.merge_states(&states, &states);
        for (i, &x) in merged.iter().take(4).enumerate() {
            assert!((x - 5.0 * v[i]).abs() < 1e-12);
        }

        // Case 1 depends only on the step-N states.
        m.merge_case = MergeCase::LastStates;
        let mut perturbed = states.clone();
        perturbed[0] = vec![100.0; 4];
        perturbed[2] = vec![-7.0; 4];
        let a = m.merge_states(&states, &states);
        let b = m.merge_states(&perturbed, &perturbed);
        assert_eq!(a, b);

        // Case 5 with all-ones weights is case 3 at initialization.
        m.merge_case = MergeCase::FullAttention;
        let c5 = m.merge_states(&states, &states);
        m.merge_case = MergeCase::UniformSum;
        let c3 = m.merge_states(&states, &states);
        assert_eq!(c5, c3);
    }

    #[test]
    fn argmax_shift_invariant() {
        let m = small_model(DecoderHead::Softmax, Direction::Bi, MergeCase::FullAttention);
        let y = vec![0.9, -0.4, 0.2, 1.3, -1.1];
        let d = m.decode(&y).unwrap();
        let base = m.harden(&d);
        // Shifting every logit by a constant shifts nothing after softmax.
        let mut shifted: Vec<f64> = d.iter().map(|&p| p.ln() + 3.7).collect();
        softmax_row(&mut shifted);
        assert_eq!(m.harden(&shifted), base);
    }

    #[test]
    fn uni_mode_ignores_backward_parameters() {
        let m = small_model(DecoderHead::Softmax, Direction::Uni, MergeCase::FullAttention);
        let y = vec![0.4, 0.1, -0.6, 0.9, 0.0];
        let before = m.decode(&y).unwrap();
        let mut m2 = m.clone();
        m2.attn_b.fill(123.0); // unused in Uni mode
        let after = m2.decode(&y).unwrap();
        assert_eq!(before, after);
        assert!(m.bwd.is_empty());
    }

    #[test]
    fn softmax_cap_enforced() {
        let r = DecoderModel::<f64>::init(
            17,
            20,
            1,
            4,
            Direction::Bi,
            MergeCase::FullAttention,
            DecoderHead::Softmax,
            &mut RngStream::new(1, 0),
        );
        assert!(r.is_err());
    }
}
