//! Learned linear feedback code: the optimal-linear-family representative
//! the non-linear codec is compared against.
//!
//! The encoder is a pure affine map per timestep (no activation): the
//! pre-power signal at step k is a weighted sum of the message bits and
//! all earlier feedback symbols z[1..k-1] (strictly causal). The same
//! power-control layer as the neural encoder follows, and the decoder
//! scores classes linearly from the receive vector. Training reuses the
//! shared loop, so Adam, clipping, projection and the freeze pass behave
//! identically.

use crate::decoder::DecoderHead;
use crate::encoder::{power_transform, NormProvenance, NormStats, PowerLayer};
use crate::nn::init_uniform;
use crate::rng::{feedback_step, forward_step, ChannelInstance, RngStream};
use crate::scalar::Scalar;
use crate::tape::{softmax_row, stable_sigmoid, Tape, Value};
use crate::tensor::{matvec_into, Tensor};
use crate::trainer::{
    train_scheme, TrainConfig, TrainReport, TrainableScheme, TrainingSet, STREAM_FREEZE,
    STREAM_LINEAR_INIT,
};
use crate::unroll::{
    leaf_col, loss_head, power_layer_on_tape, BatchData, EpisodeGraph, NormMode, UnrollOptions,
};
use crate::{Error, Result};

/// Trainable parameters of the linear feedback scheme.
#[derive(Clone, Debug)]
pub struct LinearFeedbackModel<S> {
    /// (K x N) message weights.
    pub msg_w: Tensor<S>,
    /// (N x N) feedback weights; entry (j, k) feeds z[j] into step k and
    /// only the strictly lower-triangular part j < k is ever read, so the
    /// rest stays at its zero initialization.
    pub fb_w: Tensor<S>,
    /// 1xN power weights, sum of squares constrained to N.
    pub power_w: Tensor<S>,
    /// (N x M) decoder scoring matrix, M = 2^K or K per head.
    pub dec_w: Tensor<S>,
    pub norm_stats: Option<NormStats<S>>,
    pub power_layer: PowerLayer,
    pub head: DecoderHead,
    pub k_bits: usize,
    pub n_uses: usize,
}

impl<S: Scalar> LinearFeedbackModel<S> {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let k = config.k;
        let n = config.n;
        let m = match config.head {
            DecoderHead::Softmax => 1usize << k,
            DecoderHead::Sigmoid => k,
        };
        let mut rng = RngStream::new(config.seed, STREAM_LINEAR_INIT);
        Ok(LinearFeedbackModel {
            msg_w: init_uniform(k, n, 1.0 / (k as f64).sqrt(), &mut rng),
            fb_w: Tensor::zeros(n, n),
            power_w: Tensor::filled(1, n, S::one()),
            dec_w: init_uniform(n, m, 1.0 / (n as f64).sqrt(), &mut rng),
            norm_stats: None,
            power_layer: config.power_layer,
            head: config.head,
            k_bits: k,
            n_uses: n,
        })
    }

    fn frozen_stats(&self) -> Result<Option<&NormStats<S>>> {
        if !self.power_layer.has_norm() {
            return Ok(None);
        }
        let s = self.norm_stats.as_ref().ok_or(Error::MissingNormStats)?;
        if s.provenance != NormProvenance::Frozen {
            return Err(Error::MissingNormStats);
        }
        Ok(Some(s))
    }

    /// One closed-loop episode with frozen normalization.
    pub fn encode_episode(
        &self,
        b: &[u8],
        chan: &ChannelInstance<S>,
    ) -> Result<crate::encoder::EpisodeTrace<S>> {
        if b.len() != self.k_bits || chan.n_uses() != self.n_uses {
            return Err(Error::Mismatch("episode shape vs linear model".into()));
        }
        let stats = self.frozen_stats()?;
        let n = self.n_uses;
        let b_real: Vec<S> = b.iter().map(|&v| S::from(v).unwrap()).collect();
        let mut msg_part = vec![S::zero(); n];
        matvec_into(&mut msg_part, &b_real, &self.msg_w);

        let mut trace = crate::encoder::EpisodeTrace {
            x: Vec::with_capacity(n),
            x_tilde: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            total_power: S::zero(),
        };
        for k in 0..n {
            let mut x_tilde = msg_part[k];
            for j in 0..k {
                x_tilde = x_tilde + self.fb_w.get(j, k) * trace.z[j];
            }
            let x = power_transform(x_tilde, k, self.power_layer, stats, &self.power_w);
            let y = forward_step(x, chan.n1[k]);
            let z = feedback_step(y, chan.n2[k]);
            trace.x.push(x);
            trace.x_tilde.push(x_tilde);
            trace.y.push(y);
            trace.z.push(z);
            trace.total_power = trace.total_power + x * x;
        }
        Ok(trace)
    }

    /// Linear class scoring of the receive vector, then the head.
    pub fn decode(&self, y: &[S]) -> Result<Vec<S>> {
        if y.len() != self.n_uses {
            return Err(Error::Mismatch("receive length vs linear model".into()));
        }
        let mut logits = vec![S::zero(); self.dec_w.cols()];
        matvec_into(&mut logits, y, &self.dec_w);
        match self.head {
            DecoderHead::Softmax => softmax_row(&mut logits),
            DecoderHead::Sigmoid => logits.iter_mut().for_each(|v| *v = stable_sigmoid(*v)),
        }
        Ok(logits)
    }

    pub fn harden(&self, d_hat: &[S]) -> Vec<u8> {
        match self.head {
            DecoderHead::Softmax => {
                crate::decoder::index_to_bits(crate::decoder::argmax(d_hat), self.k_bits)
            }
            DecoderHead::Sigmoid => d_hat
                .iter()
                .map(|&p| if p > S::from(0.5).unwrap() { 1 } else { 0 })
                .collect(),
        }
    }

    /// Sequential full-data freeze, mirroring the neural procedure: step-k
    /// statistics are computed over every episode before any episode
    /// advances past step k.
    pub fn freeze_norm_stats(&mut self, data: &TrainingSet<S>) -> Result<Vec<usize>> {
        if data.count < 2 {
            return Err(Error::InvalidParam(
                "freezing statistics needs at least two episodes".into(),
            ));
        }
        if data.k != self.k_bits || data.n != self.n_uses {
            return Err(Error::Mismatch("training set vs linear model (K, N)".into()));
        }
        let j = data.count;
        let n = self.n_uses;
        // Per-episode message parts, computed once.
        let mut msg_part = vec![S::zero(); j * n];
        let mut b_real = vec![S::zero(); self.k_bits];
        for ep in 0..j {
            for (i, &bit) in data.episode_bits(ep).iter().enumerate() {
                b_real[i] = S::from(bit).unwrap();
            }
            matvec_into(&mut msg_part[ep * n..(ep + 1) * n], &b_real, &self.msg_w);
        }
        let mut z_hist = vec![S::zero(); j * n];
        let mut col = vec![S::zero(); j];
        let mut mean = Vec::with_capacity(n);
        let mut var = Vec::with_capacity(n);
        let mut floored = Vec::new();
        for k in 0..n {
            for ep in 0..j {
                let mut x_tilde = msg_part[ep * n + k];
                for jj in 0..k {
                    x_tilde = x_tilde + self.fb_w.get(jj, k) * z_hist[ep * n + jj];
                }
                col[ep] = x_tilde;
            }
            let (m_k, v_k, hit) = NormStats::column_stats(&col);
            if hit {
                floored.push(k);
            }
            let dev = v_k.sqrt();
            for ep in 0..j {
                let normed = if self.power_layer.has_norm() {
                    (col[ep] - m_k) / dev
                } else {
                    col[ep]
                };
                let x = if self.power_layer.has_power() {
                    normed * self.power_w.get(0, k)
                } else {
                    normed
                };
                let y = forward_step(x, data.n1[ep * n + k]);
                z_hist[ep * n + k] = feedback_step(y, data.n2[ep * n + k]);
            }
            mean.push(m_k);
            var.push(v_k);
        }
        self.norm_stats = Some(NormStats {
            mean,
            var,
            provenance: NormProvenance::Frozen,
            floored: floored.clone(),
        });
        Ok(floored)
    }

    /// (name, tensor) pairs in the canonical trainable order.
    pub fn trainable(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("lin.msg_w".to_string(), &self.msg_w),
            ("lin.fb_w".to_string(), &self.fb_w),
        ];
        if self.power_layer.has_power() {
            out.push(("lin.power_w".into(), &self.power_w));
        }
        out.push(("lin.dec_w".into(), &self.dec_w));
        out
    }
}

impl<S: Scalar> TrainableScheme<S> for LinearFeedbackModel<S> {
    fn bind_and_build(
        &self,
        tape: &mut Tape<S>,
        data: &BatchData<S>,
        opts: &UnrollOptions,
    ) -> Result<(Vec<Value>, EpisodeGraph)> {
        let n = self.n_uses;
        let frozen = if opts.norm == NormMode::Frozen {
            self.frozen_stats()?.cloned()
        } else {
            None
        };
        let msg_w = tape.leaf_from(&self.msg_w);
        let fb_w = tape.leaf_from(&self.fb_w);
        let power_w = self
            .power_layer
            .has_power()
            .then(|| tape.leaf_from(&self.power_w));
        let dec_w = tape.leaf_from(&self.dec_w);

        let bits_leaf = tape.leaf_from(&data.bits);
        let msg_part = tape.matmul(bits_leaf, msg_w);
        let n1_cols: Vec<Value> = (0..n).map(|k| leaf_col(tape, &data.n1, k)).collect();
        let n2_cols: Vec<Value> = (0..n).map(|k| leaf_col(tape, &data.n2, k)).collect();

        let mut z_cols: Vec<Value> = Vec::with_capacity(n);
        let mut x_cols = Vec::with_capacity(n);
        let mut x_tilde_cols = Vec::with_capacity(n);
        let mut y_cols = Vec::with_capacity(n);
        for k in 0..n {
            let mut x_tilde = tape.slice_col(msg_part, k);
            for (j, &z) in z_cols.iter().enumerate().take(k) {
                let w = tape.get_element(fb_w, j, k);
                let term = tape.mul_scalar(z, w);
                x_tilde = tape.add(x_tilde, term);
            }
            let x = power_layer_on_tape(
                tape,
                x_tilde,
                k,
                self.power_layer,
                frozen.as_ref(),
                power_w,
            );
            let y = tape.add(x, n1_cols[k]);
            let mut z = tape.add(y, n2_cols[k]);
            if opts.detach_feedback {
                z = tape.detach(z);
            }
            z_cols.push(z);
            x_cols.push(x);
            x_tilde_cols.push(x_tilde);
            y_cols.push(y);
        }
        let mut y_mat = y_cols[0];
        for &y in &y_cols[1..] {
            y_mat = tape.concat_cols(y_mat, y);
        }
        let logits = tape.matmul(y_mat, dec_w);
        let (probs, loss) = loss_head(tape, logits, self.head, bits_leaf, &data.hot, self.k_bits);

        let mut handles = vec![msg_w, fb_w];
        if let Some(p) = power_w {
            handles.push(p);
        }
        handles.push(dec_w);
        Ok((
            handles,
            EpisodeGraph {
                loss,
                probs,
                x_cols,
                x_tilde_cols,
                y_cols,
            },
        ))
    }

    fn trainable_shapes(&self) -> Vec<(usize, usize)> {
        self.trainable().iter().map(|(_, t)| t.shape()).collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let has_power = self.power_layer.has_power();
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.msg_w, &mut self.fb_w];
        if has_power {
            out.push(&mut self.power_w);
        }
        out.push(&mut self.dec_w);
        out
    }

    fn enforce_constraints(&mut self, n_uses: usize) -> Result<f64> {
        if !self.power_layer.has_power() {
            return Ok(0.0);
        }
        crate::encoder::project_power_weights(&mut self.power_w)?;
        let ssq = self.power_w.sq_sum().to_f64().unwrap();
        Ok((ssq - n_uses as f64).abs())
    }

    fn freeze(&mut self, config: &TrainConfig) -> Result<Vec<usize>> {
        if !self.power_layer.has_norm() {
            return Ok(Vec::new());
        }
        let mut rng = RngStream::new(config.seed, STREAM_FREEZE);
        let set = TrainingSet::<S>::generate(
            &mut rng,
            config.train_samples,
            config.k,
            config.n,
            &config.noise()?,
        )?;
        self.freeze_norm_stats(&set)
    }

    fn head(&self) -> DecoderHead {
        self.head
    }
}

/// Trains the linear scheme under the shared training policy. The GRU
/// size fields of the config are ignored; everything else applies.
pub fn train_linear_feedback<S: Scalar>(
    config: &TrainConfig,
) -> Result<(LinearFeedbackModel<S>, TrainReport)> {
    train_scheme(config, LinearFeedbackModel::init(config)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_channel, NoiseParams};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            k: 3,
            n: 6,
            sigma1_sq: 0.794,
            sigma2_sq: 0.1,
            train_samples: 200,
            batch: 50,
            epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_feedback_weights_reduce_to_a_block_code() {
        let cfg = tiny_config();
        let mut model = LinearFeedbackModel::<f64>::init(&cfg).unwrap();
        // fb_w is zero at init; freeze stats, then x must not depend on
        // the channel realization at all.
        let mut rng = RngStream::new(9, STREAM_FREEZE);
        let set = TrainingSet::generate(&mut rng, 500, 3, 6, &cfg.noise().unwrap()).unwrap();
        model.freeze_norm_stats(&set).unwrap();

        let b = [1, 0, 1];
        let params = NoiseParams::new(0.794, 0.1).unwrap();
        let mut r1 = RngStream::new(100, 0);
        let mut r2 = RngStream::new(200, 0);
        let c1 = sample_channel::<f64>(&mut r1, 6, &params).unwrap();
        let c2 = sample_channel::<f64>(&mut r2, 6, &params).unwrap();
        let t1 = model.encode_episode(&b, &c1).unwrap();
        let t2 = model.encode_episode(&b, &c2).unwrap();
        assert_eq!(t1.x, t2.x, "x must ignore the channel when fb_w = 0");
    }

    #[test]
    fn strict_causality_is_structural() {
        // Train one epoch; entries on and above the diagonal never move.
        let cfg = tiny_config();
        let (model, report) = train_linear_feedback::<f64>(&cfg).unwrap();
        assert!(!report.diverged);
        for j in 0..6 {
            for k in 0..=j {
                assert_eq!(model.fb_w.get(j, k), 0.0, "fb_w[{j}][{k}] moved");
            }
        }
        // Power projection held.
        assert!(report.max_power_violation < 1e-9);
    }
}
