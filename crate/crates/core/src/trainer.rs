//! End-to-end training loop: on-the-fly data generation, batched
//! closed-loop unroll, cross-entropy minimization with Adam, per-epoch
//! learning-rate decay, global-norm clipping, power-weight projection
//! after every step, and the post-training normalization freeze.
//!
//! All randomness flows from `TrainConfig::seed` through fixed stream ids:
//! parameter init, the per-step data batches, and the freeze pass each own
//! a disjoint id range, so a run is reproducible from the single seed and
//! restarting an epoch replays exactly the same data.
//!
//! The loop itself is generic over [`TrainableScheme`] so the neural codec
//! and the learned-linear baseline train under the identical policy.

use std::time::Instant;

use crate::decoder::{bits_to_index, DecoderHead, DecoderModel, Direction, MergeCase};
use crate::encoder::{
    freeze_norm_stats, project_power_weights, EncoderMode, EncoderModel, PowerLayer,
};
use crate::optim::{clip_global_norm, AdamState};
use crate::rng::{NoiseParams, RngStream};
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::unroll::{
    bind_decoder, bind_encoder, build_episode_graph, BatchData, EpisodeGraph, NormMode,
    UnrollOptions,
};
use crate::{Error, Result};

/// Stream-id namespaces hanging off the root seed.
pub const STREAM_ENC_INIT: u64 = 1 << 56;
pub const STREAM_DEC_INIT: u64 = 2 << 56;
pub const STREAM_TRAIN_BASE: u64 = 3 << 56;
pub const STREAM_FREEZE: u64 = 4 << 56;
pub const STREAM_LINEAR_INIT: u64 = 5 << 56;

/// Complete training configuration. `Default` is the documented default
/// for every omitted config-file key.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub n: usize,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    /// Training set size J (tuples generated on the fly each epoch).
    pub train_samples: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
    pub direction: Direction,
    pub merge_case: MergeCase,
    pub head: DecoderHead,
    pub mode: EncoderMode,
    pub power_layer: PowerLayer,
    /// Stop-gradient ablation on the feedback path.
    pub detach_feedback: bool,
    pub seed: u64,
    /// Checkpoint every E epochs through the epoch hook; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 6,
            n: 18,
            sigma1_sq: crate::rng::snr_db_to_noise_var(1.0),
            sigma2_sq: 0.01,
            train_samples: 100_000,
            batch: 500,
            epochs: 10,
            lr0: 0.01,
            lr_decay: 0.95,
            clip_norm: 1.0,
            enc_hidden: 50,
            enc_layers: 2,
            dec_hidden: 50,
            dec_layers: 2,
            direction: Direction::Bi,
            merge_case: MergeCase::FullAttention,
            head: DecoderHead::Softmax,
            mode: EncoderMode::Feedback,
            power_layer: PowerLayer::NormPower,
            detach_feedback: false,
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn noise(&self) -> Result<NoiseParams> {
        NoiseParams::new(self.sigma1_sq, self.sigma2_sq)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise()?;
        if self.n == 0 {
            return Err(Error::InvalidParam("n must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        if self.head == DecoderHead::Softmax && self.k > crate::decoder::MAX_SOFTMAX_BITS {
            return Err(Error::InvalidParam(format!(
                "softmax head limited to K <= {}, got K = {}",
                crate::decoder::MAX_SOFTMAX_BITS,
                self.k
            )));
        }
        if self.batch == 0 || self.train_samples == 0 {
            return Err(Error::InvalidParam(
                "batch and train_samples must be positive".into(),
            ));
        }
        if self.train_samples % self.batch != 0 {
            return Err(Error::InvalidParam(format!(
                "batch ({}) must divide train_samples ({})",
                self.batch, self.train_samples
            )));
        }
        if self.lr0 <= 0.0 || self.lr_decay <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::InvalidParam(
                "lr0, lr_decay and clip_norm must be positive".into(),
            ));
        }
        if self.enc_layers == 0
            || self.dec_layers == 0
            || self.enc_hidden == 0
            || self.dec_hidden == 0
        {
            return Err(Error::InvalidParam(
                "layer counts and hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_samples / self.batch
    }
}

/// Flattened set of (b, n1, n2) tuples, used by the freeze pass and audits.
#[derive(Clone, Debug)]
pub struct TrainingSet<S> {
    pub k: usize,
    pub n: usize,
    pub count: usize,
    /// count*k bits, episode-major.
    pub bits: Vec<u8>,
    /// count*n forward noise, episode-major.
    pub n1: Vec<S>,
    /// count*n feedback noise, episode-major.
    pub n2: Vec<S>,
}

impl<S: Scalar> TrainingSet<S> {
    /// Draw order per episode: K bits, then n1, then n2.
    pub fn generate(
        rng: &mut RngStream,
        count: usize,
        k: usize,
        n: usize,
        params: &NoiseParams,
    ) -> Result<Self> {
        let mut bits = Vec::with_capacity(count * k);
        let mut n1 = Vec::with_capacity(count * n);
        let mut n2 = Vec::with_capacity(count * n);
        for _ in 0..count {
            bits.extend(rng.bits(k));
            let chan = crate::rng::sample_channel::<S>(rng, n, params)?;
            n1.extend(chan.n1);
            n2.extend(chan.n2);
        }
        Ok(TrainingSet {
            k,
            n,
            count,
            bits,
            n1,
            n2,
        })
    }

    pub fn episode_bits(&self, i: usize) -> &[u8] {
        &self.bits[i * self.k..(i + 1) * self.k]
    }
}

/// Generates one training batch; same per-episode draw order as
/// [`TrainingSet::generate`].
pub fn generate_batch<S: Scalar>(
    rng: &mut RngStream,
    batch: usize,
    k: usize,
    n: usize,
    params: &NoiseParams,
) -> Result<BatchData<S>> {
    let set = TrainingSet::<S>::generate(rng, batch, k, n, params)?;
    let mut bits = Tensor::zeros(batch, k);
    let mut hot = Vec::with_capacity(batch);
    for i in 0..batch {
        let eb = set.episode_bits(i);
        hot.push(bits_to_index(eb));
        for (j, &bv) in eb.iter().enumerate() {
            bits.set(i, j, S::from(bv).unwrap());
        }
    }
    Ok(BatchData {
        bits,
        hot,
        n1: Tensor::from_vec(batch, n, set.n1),
        n2: Tensor::from_vec(batch, n, set.n2),
    })
}

/// lr after `epoch` whole epochs of decay.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: u32) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Per-run training summary.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_bler: Vec<f64>,
    pub wall_secs: f64,
    pub diverged: bool,
    /// Max |sum(w_k^2) - N| observed after any optimizer step.
    pub max_power_violation: f64,
    /// Number of NaN-triggered epoch restarts (0 or 1).
    pub lr_restarts: usize,
    /// Timesteps whose frozen variance hit the floor.
    pub floored_norm_steps: Vec<usize>,
}

/// Anything the shared training loop can optimize: the neural codec pair
/// or the learned-linear baseline.
pub trait TrainableScheme<S: Scalar>: Clone {
    /// Binds parameters onto the tape and builds the episode graph.
    /// Returns the parameter handles in the canonical trainable order.
    fn bind_and_build(
        &self,
        tape: &mut Tape<S>,
        data: &BatchData<S>,
        opts: &UnrollOptions,
    ) -> Result<(Vec<Value>, EpisodeGraph)>;

    fn trainable_shapes(&self) -> Vec<(usize, usize)>;

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>>;

    /// Post-step constraint enforcement (power-weight projection).
    /// Returns |sum(w_k^2) - N| after enforcement, or 0 when the scheme
    /// has no power weights.
    fn enforce_constraints(&mut self, n_uses: usize) -> Result<f64>;

    /// Post-training normalization freeze over a fresh J-sample stream.
    /// Returns the floored timesteps (empty when not applicable).
    fn freeze(&mut self, config: &TrainConfig) -> Result<Vec<usize>>;

    fn head(&self) -> DecoderHead;
}

/// The neural encoder/decoder pair as one trainable unit.
#[derive(Clone, Debug)]
pub struct NeuralScheme<S> {
    pub enc: EncoderModel<S>,
    pub dec: DecoderModel<S>,
    pub detach_feedback: bool,
}

impl<S: Scalar> NeuralScheme<S> {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let enc = EncoderModel::init(
            config.k,
            config.n,
            config.enc_layers,
            config.enc_hidden,
            config.mode,
            config.power_layer,
            &mut RngStream::new(config.seed, STREAM_ENC_INIT),
        );
        let dec = DecoderModel::init(
            config.k,
            config.n,
            config.dec_layers,
            config.dec_hidden,
            config.direction,
            config.merge_case,
            config.head,
            &mut RngStream::new(config.seed, STREAM_DEC_INIT),
        )?;
        Ok(NeuralScheme {
            enc,
            dec,
            detach_feedback: config.detach_feedback,
        })
    }
}

impl<S: Scalar> TrainableScheme<S> for NeuralScheme<S> {
    fn bind_and_build(
        &self,
        tape: &mut Tape<S>,
        data: &BatchData<S>,
        opts: &UnrollOptions,
    ) -> Result<(Vec<Value>, EpisodeGraph)> {
        let enc_nodes = bind_encoder(tape, &self.enc);
        let dec_nodes = bind_decoder(tape, &self.dec);
        let graph = build_episode_graph(tape, &self.enc, &enc_nodes, &self.dec, &dec_nodes, data, opts)?;
        let handles = enc_nodes
            .values()
            .into_iter()
            .chain(dec_nodes.values())
            .collect();
        Ok((handles, graph))
    }

    fn trainable_shapes(&self) -> Vec<(usize, usize)> {
        self.enc
            .trainable()
            .iter()
            .map(|(_, t)| t.shape())
            .chain(self.dec.trainable().iter().map(|(_, t)| t.shape()))
            .collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.enc.trainable_mut();
        out.extend(self.dec.trainable_mut());
        out
    }

    fn enforce_constraints(&mut self, n_uses: usize) -> Result<f64> {
        if !self.enc.power_layer.has_power() {
            return Ok(0.0);
        }
        project_power_weights(&mut self.enc.power_w)?;
        let ssq = self.enc.power_w.sq_sum().to_f64().unwrap();
        Ok((ssq - n_uses as f64).abs())
    }

    fn freeze(&mut self, config: &TrainConfig) -> Result<Vec<usize>> {
        if !self.enc.power_layer.has_norm() {
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
        Ok(freeze_norm_stats(&mut self.enc, &set)?.floored)
    }

    fn head(&self) -> DecoderHead {
        self.dec.head
    }
}

/// Called after each epoch with (epoch index, scheme so far).
pub type EpochHook<'a, M> = &'a mut dyn FnMut(usize, &M) -> Result<()>;

pub fn train<S: Scalar>(
    config: &TrainConfig,
) -> Result<(EncoderModel<S>, DecoderModel<S>, TrainReport)> {
    let (scheme, report) = train_scheme(config, NeuralScheme::init(config)?, None)?;
    Ok((scheme.enc, scheme.dec, report))
}

pub fn train_with_hook<S: Scalar>(
    config: &TrainConfig,
    hook: EpochHook<'_, NeuralScheme<S>>,
) -> Result<(EncoderModel<S>, DecoderModel<S>, TrainReport)> {
    let (scheme, report) = train_scheme(config, NeuralScheme::init(config)?, Some(hook))?;
    Ok((scheme.enc, scheme.dec, report))
}

/// Runs the shared training loop on an initialized scheme.
///
/// On a NaN loss or gradient the epoch restarts once from its starting
/// parameters at half the learning rate; a second NaN aborts with the
/// divergence flag set and the last good parameters returned.
pub fn train_scheme<S: Scalar, M: TrainableScheme<S>>(
    config: &TrainConfig,
    init: M,
    mut hook: Option<EpochHook<'_, M>>,
) -> Result<(M, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let params = config.noise()?;
    let mut scheme = init;

    let shapes = scheme.trainable_shapes();
    let mut adam = AdamState::<S>::new(&shapes, S::from(config.lr0).unwrap());

    let steps = config.steps_per_epoch();
    let mut report = TrainReport::default();
    let mut lr_scale = 1.0f64;
    let mut epoch = 0usize;
    let unroll = UnrollOptions {
        norm: NormMode::BatchLive,
        detach_feedback: config.detach_feedback,
    };

    'epochs: while epoch < config.epochs {
        let snapshot = (scheme.clone(), adam.clone());
        adam.lr =
            S::from(lr_at_epoch(config.lr0, config.lr_decay, epoch as u32) * lr_scale).unwrap();

        let mut loss_sum = 0.0f64;
        let mut block_errors = 0usize;

        for t in 0..steps {
            let global_step = (epoch * steps + t) as u64;
            let mut data_rng = RngStream::new(config.seed, STREAM_TRAIN_BASE + global_step);
            let data =
                generate_batch::<S>(&mut data_rng, config.batch, config.k, config.n, &params)?;

            let mut tape = Tape::new();
            let (handles, graph) = scheme.bind_and_build(&mut tape, &data, &unroll)?;

            let loss = tape.value(graph.loss).item().to_f64().unwrap();
            let mut diverged_now = !loss.is_finite();
            if !diverged_now {
                tape.backward(graph.loss)?;
                block_errors += count_block_errors(&tape, &graph, &data, scheme.head());
                loss_sum += loss;
                let mut grads: Vec<Tensor<S>> =
                    handles.iter().map(|&v| tape.grad(v).clone()).collect();
                drop(tape);
                clip_global_norm(&mut grads, S::from(config.clip_norm).unwrap());

                let mut params_mut = scheme.trainable_mut();
                match adam.step(&mut params_mut, &grads) {
                    Ok(()) => {}
                    Err(Error::Divergence(_)) => diverged_now = true,
                    Err(e) => return Err(e),
                }
            }

            if diverged_now {
                let (s, a) = snapshot;
                if report.lr_restarts == 0 {
                    report.lr_restarts = 1;
                    lr_scale = 0.5;
                    scheme = s;
                    adam = a;
                    continue 'epochs;
                }
                report.diverged = true;
                report.wall_secs = started.elapsed().as_secs_f64();
                return Ok((s, report));
            }

            let violation = scheme.enforce_constraints(config.n)?;
            if violation > report.max_power_violation {
                report.max_power_violation = violation;
            }
        }

        report.epoch_loss.push(loss_sum / steps as f64);
        report
            .epoch_bler
            .push(block_errors as f64 / config.train_samples as f64);
        if let Some(h) = hook.as_mut() {
            h(epoch, &scheme)?;
        }
        epoch += 1;
    }

    report.floored_norm_steps = scheme.freeze(config)?;
    report.wall_secs = started.elapsed().as_secs_f64();
    Ok((scheme, report))
}

/// Hard-decision block errors of one training batch from the tape output.
fn count_block_errors<S: Scalar>(
    tape: &Tape<S>,
    graph: &EpisodeGraph,
    data: &BatchData<S>,
    head: DecoderHead,
) -> usize {
    let probs = tape.value(graph.probs);
    let half = S::from(0.5).unwrap();
    let mut errors = 0;
    for i in 0..probs.rows() {
        let wrong = match head {
            DecoderHead::Softmax => crate::decoder::argmax(probs.row(i)) != data.hot[i],
            DecoderHead::Sigmoid => probs
                .row(i)
                .iter()
                .zip(data.bits.row(i))
                .any(|(&p, &b)| (p > half) != (b > half)),
        };
        if wrong {
            errors += 1;
        }
    }
    errors
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_at_epoch(0.01, 0.95, 0), 0.01);
        assert!((lr_at_epoch(0.01, 0.95, 1) - 0.0095).abs() < 1e-18);
        let lr100 = lr_at_epoch(0.01, 0.95, 100);
        assert!((lr100 - 0.01 * 0.95f64.powi(100)).abs() < 1e-20);
        assert!((lr100 - 5.92e-5).abs() < 2e-7, "lr100 = {lr100}");
    }

    #[test]
    fn batch_statistics_and_determinism() {
        let params = NoiseParams::new(1.0, 0.1).unwrap();
        let k = 4;
        let mut rng = RngStream::new(3, 0);
        let big: BatchData<f64> = generate_batch(&mut rng, 100_000, k, 6, &params).unwrap();
        let ones: f64 = big.bits.data().iter().sum();
        let mean = ones / (100_000.0 * k as f64);
        assert!((mean - 0.5).abs() < 0.01, "bit mean {mean}");

        // All 2^K messages appear.
        let mut seen = vec![false; 1 << k];
        for &h in &big.hot {
            seen[h] = true;
        }
        assert!(seen.iter().all(|&s| s), "coupon collection failed");

        // Fixed seed reproduces the batch exactly.
        let mut rng2 = RngStream::new(3, 0);
        let again: BatchData<f64> = generate_batch(&mut rng2, 100_000, k, 6, &params).unwrap();
        assert_eq!(big.bits.data(), again.bits.data());
        assert_eq!(big.n1.data(), again.n1.data());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.train_samples = 1000;
        c.batch = 300; // does not divide
        assert!(c.validate().is_err());
        c.batch = 250;
        assert!(c.validate().is_ok());
        c.k = 17;
        assert!(c.validate().is_err());
    }
}
