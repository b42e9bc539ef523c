//! Differentiable closed-loop unroll: encoder -> channel -> decoder ->
//! loss, built batched on a [`Tape`]. This is the training forward pass;
//! gradients flow through the feedback symbols z[k] into every earlier
//! encoder step unless the feedback path is explicitly detached.

use crate::decoder::{DecoderHead, DecoderModel, Direction, MergeCase};
use crate::encoder::{EncoderMode, EncoderModel, NormProvenance, PowerLayer, VAR_FLOOR};
use crate::nn::{bind_gru, gru_cell_step, GruCellNodes};
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probability floor inside every log in the losses.
pub const PROB_FLOOR: f64 = 1e-30;

/// Which normalization statistics the unroll uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Mean/variance of the current batch (training-time behavior);
    /// gradients flow through the statistics.
    BatchLive,
    /// The encoder's frozen statistics (inference-time behavior).
    Frozen,
}

#[derive(Clone, Copy, Debug)]
pub struct UnrollOptions {
    pub norm: NormMode,
    /// Stop-gradient switch on the feedback input; forward values are
    /// unchanged but no gradient flows back through z[k] (or x[k] in
    /// open-loop mode).
    pub detach_feedback: bool,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        UnrollOptions {
            norm: NormMode::BatchLive,
            detach_feedback: false,
        }
    }
}

/// One training batch: B episodes of (bits, forward noise, feedback noise).
#[derive(Clone, Debug)]
pub struct BatchData<S> {
    /// (B x K) bit matrix, entries 0.0/1.0.
    pub bits: Tensor<S>,
    /// One-hot class index per episode (MSB-first bit order).
    pub hot: Vec<usize>,
    /// (B x N) forward noise.
    pub n1: Tensor<S>,
    /// (B x N) feedback noise.
    pub n2: Tensor<S>,
}

impl<S: Scalar> BatchData<S> {
    pub fn batch_size(&self) -> usize {
        self.bits.rows()
    }
}

/// Tape bindings for the encoder parameters, in the same canonical order
/// as [`EncoderModel::trainable`].
pub struct EncoderNodes {
    pub grus: Vec<GruCellNodes>,
    pub w_e: Value,
    pub b_e: Value,
    pub power_w: Option<Value>,
}

impl EncoderNodes {
    pub fn values(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for g in &self.grus {
            out.extend(g.values());
        }
        out.push(self.w_e);
        out.push(self.b_e);
        if let Some(p) = self.power_w {
            out.push(p);
        }
        out
    }
}

pub fn bind_encoder<S: Scalar>(tape: &mut Tape<S>, model: &EncoderModel<S>) -> EncoderNodes {
    EncoderNodes {
        grus: model.grus.iter().map(|g| bind_gru(tape, g)).collect(),
        w_e: tape.leaf_from(&model.w_e),
        b_e: tape.leaf_from(&model.b_e),
        power_w: if model.power_layer.has_power() {
            Some(tape.leaf_from(&model.power_w))
        } else {
            None
        },
    }
}

/// Tape bindings for the decoder parameters, in the same canonical order
/// as [`DecoderModel::trainable`]. In merge Case 4 the backward attention
/// handle aliases the forward one, which ties the weights exactly.
pub struct DecoderNodes {
    pub fwd: Vec<GruCellNodes>,
    pub bwd: Vec<GruCellNodes>,
    pub attn_f: Option<Value>,
    pub attn_b: Option<Value>,
    attn_b_is_separate: bool,
    pub w_d: Value,
    pub v_d: Value,
}

impl DecoderNodes {
    pub fn values(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for g in &self.fwd {
            out.extend(g.values());
        }
        for g in &self.bwd {
            out.extend(g.values());
        }
        if let Some(a) = self.attn_f {
            out.push(a);
        }
        if self.attn_b_is_separate {
            out.push(self.attn_b.unwrap());
        }
        out.push(self.w_d);
        out.push(self.v_d);
        out
    }
}

pub fn bind_decoder<S: Scalar>(tape: &mut Tape<S>, model: &DecoderModel<S>) -> DecoderNodes {
    let attn_trainable = model.merge_case.trainable();
    let attn_f = attn_trainable.then(|| tape.leaf_from(&model.attn_f));
    let (attn_b, separate) = match (model.direction, model.merge_case) {
        (Direction::Bi, MergeCase::FullAttention) => (Some(tape.leaf_from(&model.attn_b)), true),
        (Direction::Bi, MergeCase::SharedAttention) => (attn_f, false),
        _ => (None, false),
    };
    DecoderNodes {
        fwd: model.fwd.iter().map(|g| bind_gru(tape, g)).collect(),
        bwd: model.bwd.iter().map(|g| bind_gru(tape, g)).collect(),
        attn_f,
        attn_b,
        attn_b_is_separate: separate,
        w_d: tape.leaf_from(&model.w_d),
        v_d: tape.leaf_from(&model.v_d),
    }
}

/// Handles into the built episode graph.
pub struct EpisodeGraph {
    pub loss: Value,
    /// Softmax head: (B x 2^K) class probabilities; sigmoid head: (B x K)
    /// per-bit probabilities.
    pub probs: Value,
    pub x_cols: Vec<Value>,
    pub x_tilde_cols: Vec<Value>,
    pub y_cols: Vec<Value>,
}

/// Builds the full differentiable episode batch. The caller binds the
/// models first so it can read parameter gradients back out by handle.
pub fn build_episode_graph<S: Scalar>(
    tape: &mut Tape<S>,
    enc: &EncoderModel<S>,
    enc_nodes: &EncoderNodes,
    dec: &DecoderModel<S>,
    dec_nodes: &DecoderNodes,
    data: &BatchData<S>,
    opts: &UnrollOptions,
) -> Result<EpisodeGraph> {
    let b = data.batch_size();
    let n = enc.n_uses;
    let k_bits = enc.k_bits;
    if data.bits.cols() != k_bits || data.n1.cols() != n || data.n2.cols() != n {
        return Err(Error::Mismatch("batch shapes vs model (K, N)".into()));
    }
    if dec.k_bits != k_bits || dec.n_uses != n {
        return Err(Error::Mismatch("encoder and decoder (K, N) differ".into()));
    }
    if opts.norm == NormMode::BatchLive && enc.power_layer.has_norm() && b < 2 {
        return Err(Error::InvalidParam(
            "batch-live normalization needs batch size >= 2".into(),
        ));
    }
    let frozen = if opts.norm == NormMode::Frozen && enc.power_layer.has_norm() {
        let stats = enc.norm_stats.as_ref().ok_or(Error::MissingNormStats)?;
        if stats.provenance != NormProvenance::Frozen {
            return Err(Error::MissingNormStats);
        }
        Some(stats.clone())
    } else {
        None
    };

    let bits_leaf = tape.leaf_from(&data.bits);
    let n1_cols: Vec<Value> = (0..n).map(|k| leaf_col(tape, &data.n1, k)).collect();
    let n2_cols: Vec<Value> = (0..n).map(|k| leaf_col(tape, &data.n2, k)).collect();

    // ---- Encoder unroll ----
    let mut h: Vec<Value> = enc
        .grus
        .iter()
        .map(|g| tape.leaf(Tensor::zeros(b, g.hidden_size())))
        .collect();
    let mut fb = tape.leaf(Tensor::zeros(b, 1));
    let mut x_cols = Vec::with_capacity(n);
    let mut x_tilde_cols = Vec::with_capacity(n);
    let mut y_cols = Vec::with_capacity(n);

    for k in 0..n {
        let input = tape.concat_cols(bits_leaf, fb);
        let mut carry = input;
        for (l, cell) in enc_nodes.grus.iter().enumerate() {
            let next = gru_cell_step(tape, carry, h[l], cell);
            h[l] = next;
            carry = next;
        }
        let pre = tape.matmul(carry, enc_nodes.w_e);
        let pre_b = tape.add_scalar(pre, enc_nodes.b_e);
        let x_tilde = tape.tanh(pre_b);

        let x = power_layer_on_tape(
            tape,
            x_tilde,
            k,
            enc.power_layer,
            frozen.as_ref(),
            enc_nodes.power_w,
        );
        let y = tape.add(x, n1_cols[k]);
        let z = tape.add(y, n2_cols[k]);
        let mut next_fb = match enc.mode {
            EncoderMode::Feedback => z,
            EncoderMode::OpenLoop => x,
        };
        if opts.detach_feedback {
            next_fb = tape.detach(next_fb);
        }
        fb = next_fb;
        x_cols.push(x);
        x_tilde_cols.push(x_tilde);
        y_cols.push(y);
    }

    // ---- Decoder ----
    let fwd_states = run_stack_on_tape(tape, &dec_nodes.fwd, dec, &y_cols, b, false);
    let r_f_att = merge_direction(tape, dec, dec_nodes.attn_f, &fwd_states, true);
    let r_att = if dec.direction == Direction::Bi {
        let bwd_states = run_stack_on_tape(tape, &dec_nodes.bwd, dec, &y_cols, b, true);
        let r_b_att = merge_direction(tape, dec, dec_nodes.attn_b, &bwd_states, false);
        tape.concat_cols(r_f_att, r_b_att)
    } else {
        r_f_att
    };
    let prod = tape.matmul(r_att, dec_nodes.w_d);
    let logits = tape.add_row(prod, dec_nodes.v_d);
    let (probs, loss) = loss_head(tape, logits, dec.head, bits_leaf, &data.hot, k_bits);

    Ok(EpisodeGraph {
        loss,
        probs,
        x_cols,
        x_tilde_cols,
        y_cols,
    })
}

/// The power-control layer on the tape: normalization (batch-live when no
/// frozen stats are supplied) followed by power-weight multiplication,
/// with either stage dropped according to `layer`.
pub fn power_layer_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x_tilde: Value,
    k: usize,
    layer: PowerLayer,
    frozen: Option<&crate::encoder::NormStats<S>>,
    power_w: Option<Value>,
) -> Value {
    let normed = if layer.has_norm() {
        match frozen {
            Some(stats) => {
                let centered = tape.add_const(x_tilde, -stats.mean[k]);
                tape.div_const(centered, stats.var[k].sqrt())
            }
            None => {
                let m = tape.mean_all(x_tilde);
                let centered = tape.sub_scalar(x_tilde, m);
                let sq = tape.mul(centered, centered);
                let var = tape.mean_all(sq);
                let var_f = tape.clamp_min(var, S::from(VAR_FLOOR).unwrap());
                let dev = tape.sqrt(var_f);
                tape.div_scalar(centered, dev)
            }
        }
    } else {
        x_tilde
    };
    match power_w {
        Some(pw) => {
            let w_el = tape.get_element(pw, 0, k);
            tape.mul_scalar(normed, w_el)
        }
        None => normed,
    }
}

/// Output-head loss: blockwise cross-entropy (softmax head, loss averaged
/// over the batch) or per-bit binary cross-entropy summed over the K bits
/// and averaged over the batch (sigmoid head).
pub fn loss_head<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Value,
    head: DecoderHead,
    bits_leaf: Value,
    hot: &[usize],
    k_bits: usize,
) -> (Value, Value) {
    let floor = S::from(PROB_FLOOR).unwrap();
    match head {
        DecoderHead::Softmax => {
            let probs = tape.softmax(logits);
            let picked = tape.gather_col(probs, hot.to_vec());
            let lp = tape.ln_clamped(picked, floor);
            let mean = tape.mean_all(lp);
            (probs, tape.mul_const(mean, -S::one()))
        }
        DecoderHead::Sigmoid => {
            let probs = tape.sigmoid(logits);
            let ln_p = tape.ln_clamped(probs, floor);
            let hits = tape.mul(bits_leaf, ln_p);
            let q = tape.one_minus(probs);
            let ln_q = tape.ln_clamped(q, floor);
            let anti_bits = tape.one_minus(bits_leaf);
            let misses = tape.mul(anti_bits, ln_q);
            let sum = tape.add(hits, misses);
            let mean = tape.mean_all(sum);
            // Mean over B*K entries times -K = per-episode BCE summed over
            // bits, averaged over the batch.
            (probs, tape.mul_const(mean, -S::from(k_bits).unwrap()))
        }
    }
}

/// A (B x 1) leaf holding column `k` of `t`.
pub fn leaf_col<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<S>, k: usize) -> Value {
    let col = Tensor::from_vec(t.rows(), 1, (0..t.rows()).map(|i| t.get(i, k)).collect());
    tape.leaf(col)
}

fn run_stack_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    stack: &[GruCellNodes],
    dec: &DecoderModel<S>,
    y_cols: &[Value],
    batch: usize,
    reverse: bool,
) -> Vec<Value> {
    let n = y_cols.len();
    let hidden = dec.hidden_size();
    let mut h: Vec<Value> = stack
        .iter()
        .map(|_| tape.leaf(Tensor::zeros(batch, hidden)))
        .collect();
    let mut out = vec![None; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for k in order {
        let mut carry = y_cols[k];
        for (l, cell) in stack.iter().enumerate() {
            let next = gru_cell_step(tape, carry, h[l], cell);
            h[l] = next;
            carry = next;
        }
        out[k] = Some(carry);
    }
    out.into_iter().map(|v| v.unwrap()).collect()
}

fn merge_direction<S: Scalar>(
    tape: &mut Tape<S>,
    dec: &DecoderModel<S>,
    attn: Option<Value>,
    states: &[Value],
    forward: bool,
) -> Value {
    let n = states.len();
    let mut acc: Option<Value> = None;
    for (k, &state) in states.iter().enumerate() {
        let term = match attn {
            Some(a) => {
                let w = tape.get_element(a, 0, k);
                tape.mul_scalar(state, w)
            }
            None => {
                let w: S = if forward {
                    dec.merge_case.fixed_weight_fwd(k, n)
                } else {
                    dec.merge_case.fixed_weight_bwd(k, n)
                };
                tape.mul_const(state, w)
            }
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one timestep")
}
