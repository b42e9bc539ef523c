//! State-propagation encoder: a stack of unidirectional GRUs, a tanh
//! signal layer, and the power-control layer (per-timestep normalization
//! with trainable power weights constrained to sum-of-squares N).
//!
//! Two encoding modes exist: `Feedback` feeds the noisy feedback z[k-1]
//! into the GRU stack at step k, `OpenLoop` feeds the encoder's own
//! previous transmit symbol x[k-1] instead (no feedback dependence at
//! all, which turns the scheme into an open-loop error-correcting code).

use crate::nn::{GruCell, GruScratch};
use crate::rng::{feedback_step, forward_step, ChannelInstance};
use crate::scalar::Scalar;
use crate::tensor::{matvec_into, Tensor};
use crate::trainer::TrainingSet;
use crate::{Error, Result};

/// Variance floor applied by every normalization in the lab.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    Feedback,
    OpenLoop,
}

/// Power-control layer variants (the power-control ablation axis).
/// `PowerOnly` multiplies the tanh output by w_k without normalizing;
/// `None` transmits the tanh output as-is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PowerLayer {
    NormPower,
    NormOnly,
    PowerOnly,
    None,
}

impl PowerLayer {
    pub fn has_norm(self) -> bool {
        matches!(self, PowerLayer::NormPower | PowerLayer::NormOnly)
    }

    pub fn has_power(self) -> bool {
        matches!(self, PowerLayer::NormPower | PowerLayer::PowerOnly)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormProvenance {
    BatchLive,
    Frozen,
}

/// Per-timestep normalization statistics (mean and variance with a 1/J
/// denominator), plus where they came from.
#[derive(Clone, Debug)]
pub struct NormStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub provenance: NormProvenance,
    /// Timesteps whose variance hit [`VAR_FLOOR`].
    pub floored: Vec<usize>,
}

impl<S: Scalar> NormStats<S> {
    /// Sample mean and 1/J-variance of one timestep column, floored.
    pub fn column_stats(samples: &[S]) -> (S, S, bool) {
        let j = S::from(samples.len()).unwrap();
        let mean = samples.iter().fold(S::zero(), |a, &x| a + x) / j;
        let var = samples
            .iter()
            .fold(S::zero(), |a, &x| a + (x - mean) * (x - mean))
            / j;
        let floor = S::from(VAR_FLOOR).unwrap();
        if var < floor {
            (mean, floor, true)
        } else {
            (mean, var, false)
        }
    }
}

/// All trainable state of the encoder plus its configuration flags.
#[derive(Clone, Debug)]
pub struct EncoderModel<S> {
    /// GRU stack; layer 0 consumes `[b, feedback]` (input size K+1).
    pub grus: Vec<GruCell<S>>,
    /// Signal layer weights, (hidden_last x 1).
    pub w_e: Tensor<S>,
    /// Signal layer bias, 1x1.
    pub b_e: Tensor<S>,
    /// Power weights w_k, 1xN, constrained to sum(w_k^2) = N.
    pub power_w: Tensor<S>,
    pub norm_stats: Option<NormStats<S>>,
    pub mode: EncoderMode,
    pub power_layer: PowerLayer,
    pub k_bits: usize,
    pub n_uses: usize,
}

impl<S: Scalar> EncoderModel<S> {
    /// Fresh model with GRUs initialized U(-1/sqrt(H), 1/sqrt(H)), dense
    /// layers by the same fan-in rule, and power weights all ones.
    pub fn init(
        k_bits: usize,
        n_uses: usize,
        layers: usize,
        hidden: usize,
        mode: EncoderMode,
        power_layer: PowerLayer,
        rng: &mut crate::rng::RngStream,
    ) -> Self {
        assert!(layers >= 1, "encoder needs at least one GRU layer");
        let mut grus = Vec::with_capacity(layers);
        for l in 0..layers {
            let input = if l == 0 { k_bits + 1 } else { hidden };
            grus.push(GruCell::init(input, hidden, rng));
        }
        let half = 1.0 / (hidden as f64).sqrt();
        EncoderModel {
            grus,
            w_e: crate::nn::init_uniform(hidden, 1, half, rng),
            b_e: crate::nn::init_uniform(1, 1, half, rng),
            power_w: Tensor::filled(1, n_uses, S::one()),
            norm_stats: None,
            mode,
            power_layer,
            k_bits,
            n_uses,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.grus[0].hidden_size()
    }

    /// (name, tensor) pairs for every trainable array, in the canonical
    /// order shared by the optimizer and the model file.
    pub fn trainable(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (l, g) in self.grus.iter().enumerate() {
            for (name, t) in crate::nn::GRU_PARAM_NAMES.iter().zip(g.params()) {
                out.push((format!("enc.gru{l}.{name}"), t));
            }
        }
        out.push(("enc.w_e".into(), &self.w_e));
        out.push(("enc.b_e".into(), &self.b_e));
        if self.power_layer.has_power() {
            out.push(("enc.power_w".into(), &self.power_w));
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let has_power = self.power_layer.has_power();
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        for g in self.grus.iter_mut() {
            out.extend(g.params_mut());
        }
        out.push(&mut self.w_e);
        out.push(&mut self.b_e);
        if has_power {
            out.push(&mut self.power_w);
        }
        out
    }

    fn check_episode_inputs(&self, b: &[u8], chan: &ChannelInstance<S>) -> Result<()> {
        if b.len() != self.k_bits {
            return Err(Error::Mismatch(format!(
                "bit stream length {} but encoder K = {}",
                b.len(),
                self.k_bits
            )));
        }
        if chan.n_uses() != self.n_uses {
            return Err(Error::Mismatch(format!(
                "channel has {} uses but encoder N = {}",
                chan.n_uses(),
                self.n_uses
            )));
        }
        Ok(())
    }

    /// Runs one episode through the closed loop with frozen normalization.
    ///
    /// Fails when the power layer includes normalization and no frozen
    /// statistics are present (batch-live statistics only exist inside the
    /// training unroll).
    pub fn encode_episode(&self, b: &[u8], chan: &ChannelInstance<S>) -> Result<EpisodeTrace<S>> {
        self.check_episode_inputs(b, chan)?;
        let stats = if self.power_layer.has_norm() {
            let s = self.norm_stats.as_ref().ok_or(Error::MissingNormStats)?;
            if s.provenance != NormProvenance::Frozen {
                return Err(Error::MissingNormStats);
            }
            Some(s)
        } else {
            None
        };

        let n = self.n_uses;
        let hidden = self.hidden_size();
        let mut states: Vec<Vec<S>> = self.grus.iter().map(|_| vec![S::zero(); hidden]).collect();
        let mut work = StackWork::new(hidden);
        let mut input = vec![S::zero(); self.k_bits + 1];
        for (i, &bit) in b.iter().enumerate() {
            input[i] = S::from(bit).unwrap();
        }

        let mut trace = EpisodeTrace {
            x: Vec::with_capacity(n),
            x_tilde: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            total_power: S::zero(),
        };
        let mut fb = S::zero();

        for k in 0..n {
            input[self.k_bits] = fb;
            let mut iter = states.iter_mut().map(|h| h.as_mut_slice());
            let x_tilde = self.signal_step(&input, &mut iter, &mut work);
            let x = self.apply_power_layer(x_tilde, k, stats);
            let y = forward_step(x, chan.n1[k]);
            let z = feedback_step(y, chan.n2[k]);
            fb = match self.mode {
                EncoderMode::Feedback => z,
                EncoderMode::OpenLoop => x,
            };
            trace.x.push(x);
            trace.x_tilde.push(x_tilde);
            trace.y.push(y);
            trace.z.push(z);
            trace.total_power = trace.total_power + x * x;
        }
        Ok(trace)
    }

    /// Advances the GRU stack one step over the per-layer state slices
    /// yielded by `states`, and returns the tanh signal output.
    fn signal_step<'a>(
        &self,
        input: &[S],
        states: &mut dyn Iterator<Item = &'a mut [S]>,
        work: &mut StackWork<S>,
    ) -> S {
        for (l, cell) in self.grus.iter().enumerate() {
            let h = states.next().expect("one state slice per GRU layer");
            if l == 0 {
                cell.step(input, h, &mut work.scratch, &mut work.next);
            } else {
                cell.step(&work.carry, h, &mut work.scratch, &mut work.next);
            }
            h.copy_from_slice(&work.next);
            work.carry.copy_from_slice(&work.next);
        }
        let mut pre = [S::zero()];
        matvec_into(&mut pre, &work.carry, &self.w_e);
        (pre[0] + self.b_e.item()).tanh()
    }

    /// x_tilde -> x under the configured power layer.
    fn apply_power_layer(&self, x_tilde: S, k: usize, stats: Option<&NormStats<S>>) -> S {
        power_transform(x_tilde, k, self.power_layer, stats, &self.power_w)
    }
}

/// Scalar power-control transform, the inference-side mirror of
/// [`crate::unroll::power_layer_on_tape`]: (x - m_k)/sqrt(var_k) when
/// stats are supplied, then multiplication by w_k when the layer has
/// power weights.
pub fn power_transform<S: Scalar>(
    x_tilde: S,
    k: usize,
    layer: PowerLayer,
    stats: Option<&NormStats<S>>,
    power_w: &Tensor<S>,
) -> S {
    let normed = match stats {
        Some(s) => (x_tilde - s.mean[k]) / s.var[k].sqrt(),
        None => x_tilde,
    };
    if layer.has_power() {
        normed * power_w.get(0, k)
    } else {
        normed
    }
}

/// Reusable buffers for stepping a GRU stack.
struct StackWork<S> {
    carry: Vec<S>,
    next: Vec<S>,
    scratch: GruScratch<S>,
}

impl<S: Scalar> StackWork<S> {
    fn new(hidden: usize) -> Self {
        StackWork {
            carry: vec![S::zero(); hidden],
            next: vec![S::zero(); hidden],
            scratch: GruScratch::new(),
        }
    }
}

/// Transcript of one closed-loop episode.
#[derive(Clone, Debug)]
pub struct EpisodeTrace<S> {
    pub x: Vec<S>,
    pub x_tilde: Vec<S>,
    pub y: Vec<S>,
    pub z: Vec<S>,
    pub total_power: S,
}

/// Rescales w so that sum(w_k^2) equals its length N. A no-op (bitwise)
/// when the constraint already holds to rounding, which makes the
/// projection exactly idempotent.
pub fn project_power_weights<S: Scalar>(w: &mut Tensor<S>) -> Result<()> {
    let target = S::from(w.len()).unwrap();
    let ssq = w.sq_sum();
    if ssq == S::zero() {
        return Err(Error::InvalidParam(
            "cannot project all-zero power weights".into(),
        ));
    }
    let eps = S::epsilon() * S::from(8.0).unwrap();
    if (ssq - target).abs() <= target * eps {
        return Ok(());
    }
    let scale = (target / ssq).sqrt();
    for v in w.data_mut() {
        *v = *v * scale;
    }
    Ok(())
}

/// Outcome of [`freeze_norm_stats`].
#[derive(Clone, Debug)]
pub struct FreezeInfo {
    pub samples: usize,
    pub floored: Vec<usize>,
}

/// Computes and stores frozen per-timestep statistics from a full pass
/// over `data`, following the train-then-freeze procedure: at each step k
/// the statistics of the pre-power output over all J episodes are
/// computed before any episode advances to step k+1, so normalization at
/// step k always uses statistics of the step-k population itself.
pub fn freeze_norm_stats<S: Scalar>(
    model: &mut EncoderModel<S>,
    data: &TrainingSet<S>,
) -> Result<FreezeInfo> {
    if data.count < 2 {
        return Err(Error::InvalidParam(
            "freezing statistics needs at least two episodes".into(),
        ));
    }
    if data.k != model.k_bits || data.n != model.n_uses {
        return Err(Error::Mismatch(format!(
            "training set ({}, {}) vs encoder ({}, {})",
            data.k, data.n, model.k_bits, model.n_uses
        )));
    }
    let j = data.count;
    let n = model.n_uses;
    let hidden = model.hidden_size();
    let layers = model.grus.len();

    let mut states: Vec<Vec<S>> = (0..layers).map(|_| vec![S::zero(); j * hidden]).collect();
    let mut fb = vec![S::zero(); j];
    let mut col = vec![S::zero(); j];
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    let mut floored = Vec::new();

    let mut work = StackWork::new(hidden);
    let mut input = vec![S::zero(); model.k_bits + 1];

    for k in 0..n {
        for ep in 0..j {
            for (i, &bit) in data.bits[ep * data.k..(ep + 1) * data.k].iter().enumerate() {
                input[i] = S::from(bit).unwrap();
            }
            input[model.k_bits] = fb[ep];
            let mut iter = states
                .iter_mut()
                .map(|layer| &mut layer[ep * hidden..(ep + 1) * hidden]);
            col[ep] = model.signal_step(&input, &mut iter, &mut work);
        }

        let (m_k, v_k, hit_floor) = NormStats::column_stats(&col);
        if hit_floor {
            floored.push(k);
        }
        mean.push(m_k);
        var.push(v_k);

        // Finish the channel step for every episode with the step-k stats.
        let dev = v_k.sqrt();
        for ep in 0..j {
            let normed = if model.power_layer.has_norm() {
                (col[ep] - m_k) / dev
            } else {
                col[ep]
            };
            let x = if model.power_layer.has_power() {
                normed * model.power_w.get(0, k)
            } else {
                normed
            };
            let y = forward_step(x, data.n1[ep * n + k]);
            let z = feedback_step(y, data.n2[ep * n + k]);
            fb[ep] = match model.mode {
                EncoderMode::Feedback => z,
                EncoderMode::OpenLoop => x,
            };
        }
    }

    model.norm_stats = Some(NormStats {
        mean,
        var,
        provenance: NormProvenance::Frozen,
        floored: floored.clone(),
    });
    Ok(FreezeInfo {
        samples: j,
        floored,
    })
}
