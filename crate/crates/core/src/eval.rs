//! Monte Carlo BLER/BER estimation, feedback-noise sweeps, the power
//! audit, and weight reports.
//!
//! Trial `i` always draws from stream id `i` of the evaluation seed, so
//! counts are identical whether trials run serially or across any number
//! of workers; chunks are reduced in trial order.

use rayon::prelude::*;

use crate::baselines::{ConvCode, LinearFeedbackModel, RepetitionCode};
use crate::decoder::DecoderModel;
use crate::encoder::EncoderModel;
use crate::rng::{sample_channel, ChannelInstance, NoiseParams, RngStream};
use crate::scalar::Scalar;
use crate::stats::binomial_ci;
use crate::trainer::NeuralScheme;
use crate::{Error, Result};

/// Trials processed between stopping-rule checks; fixed so results do not
/// depend on the worker count.
const TRIAL_CHUNK: u64 = 256;

/// Anything that can run one coding episode over the channel.
pub trait Codec<S: Scalar>: Sync {
    fn scheme_id(&self) -> String;
    fn k_bits(&self) -> usize;
    fn n_uses(&self) -> usize;
    /// Whether decoding depends on the feedback noise at all.
    fn uses_feedback(&self) -> bool;
    fn run_episode(&self, b: &[u8], chan: &ChannelInstance<S>) -> Result<EpisodeOutcome>;
}

/// Hard decisions plus the realized per-use transmit power of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub b_hat: Vec<u8>,
    pub power: Vec<f64>,
}

impl<S: Scalar> Codec<S> for NeuralScheme<S> {
    fn scheme_id(&self) -> String {
        match self.enc.mode {
            crate::encoder::EncoderMode::Feedback => "neural-feedback".into(),
            crate::encoder::EncoderMode::OpenLoop => "neural-openloop".into(),
        }
    }

    fn k_bits(&self) -> usize {
        self.enc.k_bits
    }

    fn n_uses(&self) -> usize {
        self.enc.n_uses
    }

    fn uses_feedback(&self) -> bool {
        self.enc.mode == crate::encoder::EncoderMode::Feedback
    }

    fn run_episode(&self, b: &[u8], chan: &ChannelInstance<S>) -> Result<EpisodeOutcome> {
        let trace = self.enc.encode_episode(b, chan)?;
        let d_hat = self.dec.decode(&trace.y)?;
        Ok(EpisodeOutcome {
            b_hat: self.dec.harden(&d_hat),
            power: trace
                .x
                .iter()
                .map(|&x| (x * x).to_f64().unwrap())
                .collect(),
        })
    }
}

impl<S: Scalar> Codec<S> for LinearFeedbackModel<S> {
    fn scheme_id(&self) -> String {
        "linear-feedback".into()
    }

    fn k_bits(&self) -> usize {
        self.k_bits
    }

    fn n_uses(&self) -> usize {
        self.n_uses
    }

    fn uses_feedback(&self) -> bool {
        true
    }

    fn run_episode(&self, b: &[u8], chan: &ChannelInstance<S>) -> Result<EpisodeOutcome> {
        let trace = self.encode_episode(b, chan)?;
        let d_hat = self.decode(&trace.y)?;
        Ok(EpisodeOutcome {
            b_hat: self.harden(&d_hat),
            power: trace
                .x
                .iter()
                .map(|&x| (x * x).to_f64().unwrap())
                .collect(),
        })
    }
}

impl<S: Scalar> Codec<S> for RepetitionCode {
    fn scheme_id(&self) -> String {
        "repetition".into()
    }

    fn k_bits(&self) -> usize {
        self.k
    }

    fn n_uses(&self) -> usize {
        self.n
    }

    fn uses_feedback(&self) -> bool {
        false
    }

    fn run_episode(&self, b: &[u8], chan: &ChannelInstance<S>) -> Result<EpisodeOutcome> {
        let x: Vec<S> = self.encode(b);
        let y: Vec<S> = x
            .iter()
            .zip(&chan.n1)
            .map(|(&xv, &nv)| crate::rng::forward_step(xv, nv))
            .collect();
        Ok(EpisodeOutcome {
            b_hat: self.decode(&y),
            power: vec![1.0; self.n],
        })
    }
}

/// TBCC wrapper carrying the (K, N) frame so N = 3K is explicit.
#[derive(Clone, Debug)]
pub struct TbccCodec {
    pub code: ConvCode,
    pub k: usize,
}

impl TbccCodec {
    pub fn new(k: usize) -> Self {
        TbccCodec {
            code: ConvCode::lte_rate_third(),
            k,
        }
    }
}

impl<S: Scalar> Codec<S> for TbccCodec {
    fn scheme_id(&self) -> String {
        "tbcc".into()
    }

    fn k_bits(&self) -> usize {
        self.k
    }

    fn n_uses(&self) -> usize {
        self.k * self.code.rate_den()
    }

    fn uses_feedback(&self) -> bool {
        false
    }

    fn run_episode(&self, b: &[u8], chan: &ChannelInstance<S>) -> Result<EpisodeOutcome> {
        let x: Vec<S> = self.code.encode(b);
        let y: Vec<S> = x
            .iter()
            .zip(&chan.n1)
            .map(|(&xv, &nv)| crate::rng::forward_step(xv, nv))
            .collect();
        Ok(EpisodeOutcome {
            b_hat: self.code.tbcc_decode(&y)?,
            power: vec![1.0; y.len()],
        })
    }
}

/// Stop after `target_errors` block errors or `max_trials`, whichever
/// comes first (checked at chunk granularity).
#[derive(Clone, Copy, Debug)]
pub struct StoppingRule {
    pub target_errors: u64,
    pub max_trials: u64,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule {
            target_errors: 100,
            max_trials: 1_000_000,
        }
    }
}

/// Point estimates with 95% confidence intervals and power accounting.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub scheme: String,
    pub k: usize,
    pub n: usize,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub trials: u64,
    pub block_errors: u64,
    pub bit_errors: u64,
    pub bler: f64,
    pub bler_ci: (f64, f64),
    pub ber: f64,
    pub ber_ci: (f64, f64),
    pub mean_total_power: f64,
    pub per_k_power: Vec<f64>,
}

impl EvalReport {
    /// Standard error of the BLER estimate.
    pub fn bler_stderr(&self) -> f64 {
        (self.bler * (1.0 - self.bler) / self.trials as f64).sqrt()
    }
}

struct TrialAccumulator {
    trials: u64,
    block_errors: u64,
    bit_errors: u64,
    power_sum: Vec<f64>,
}

/// Runs independent episodes until the stopping rule fires. Trial `i`
/// uses stream id `i`; per-trial draw order is K bits, then n1, then n2.
pub fn monte_carlo<S: Scalar>(
    codec: &dyn Codec<S>,
    params: &NoiseParams,
    stop: &StoppingRule,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    if stop.max_trials == 0 {
        return Err(Error::InvalidParam("max_trials must be positive".into()));
    }
    let k = codec.k_bits();
    let n = codec.n_uses();
    let mut acc = TrialAccumulator {
        trials: 0,
        block_errors: 0,
        bit_errors: 0,
        power_sum: vec![0.0; n],
    };

    let run_trial = |trial: u64| -> Result<(usize, Vec<u8>, EpisodeOutcome)> {
        let mut rng = RngStream::new(seed, trial);
        let b = rng.bits(k);
        let chan = sample_channel::<S>(&mut rng, n, params)?;
        let outcome = codec.run_episode(&b, &chan)?;
        Ok((trial as usize, b, outcome))
    };

    while acc.trials < stop.max_trials && acc.block_errors < stop.target_errors {
        let chunk = TRIAL_CHUNK.min(stop.max_trials - acc.trials);
        let range: Vec<u64> = (acc.trials..acc.trials + chunk).collect();
        let outcomes: Vec<_> = if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidParam(format!("worker pool: {e}")))?;
            pool.install(|| range.par_iter().map(|&t| run_trial(t)).collect::<Vec<_>>())
        } else {
            range.iter().map(|&t| run_trial(t)).collect()
        };
        for res in outcomes {
            let (_, b, outcome) = res?;
            let wrong_bits = b
                .iter()
                .zip(&outcome.b_hat)
                .filter(|(x, y)| x != y)
                .count() as u64;
            acc.bit_errors += wrong_bits;
            if wrong_bits > 0 {
                acc.block_errors += 1;
            }
            for (p, &v) in acc.power_sum.iter_mut().zip(&outcome.power) {
                *p += v;
            }
            acc.trials += 1;
        }
    }

    let trials = acc.trials;
    let bler = acc.block_errors as f64 / trials as f64;
    let ber = acc.bit_errors as f64 / (trials * k as u64) as f64;
    let per_k_power: Vec<f64> = acc.power_sum.iter().map(|&p| p / trials as f64).collect();
    Ok(EvalReport {
        scheme: codec.scheme_id(),
        k,
        n,
        sigma1_sq: params.sigma1_sq,
        sigma2_sq: params.sigma2_sq,
        trials,
        block_errors: acc.block_errors,
        bit_errors: acc.bit_errors,
        bler,
        bler_ci: binomial_ci(acc.block_errors, trials, 0.95),
        ber,
        ber_ci: binomial_ci(acc.bit_errors, trials * k as u64, 0.95),
        mean_total_power: per_k_power.iter().sum(),
        per_k_power,
    })
}

/// Empirical audit of the average power constraint.
#[derive(Clone, Debug)]
pub struct PowerAudit {
    pub samples: usize,
    pub mean_total_power: f64,
    pub per_k_power: Vec<f64>,
    /// |mean_total - N| / N.
    pub deviation: f64,
}

/// Mean of sum |x[k]|^2 over fresh episodes through the frozen encoder.
pub fn power_audit<S: Scalar>(
    enc: &EncoderModel<S>,
    params: &NoiseParams,
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<PowerAudit> {
    let n = enc.n_uses;
    let k = enc.k_bits;
    let run_trial = |trial: u64| -> Result<Vec<f64>> {
        let mut rng = RngStream::new(seed, trial);
        let b = rng.bits(k);
        let chan = sample_channel::<S>(&mut rng, n, params)?;
        let trace = enc.encode_episode(&b, &chan)?;
        Ok(trace.x.iter().map(|&x| (x * x).to_f64().unwrap()).collect())
    };
    // Fail fast on missing frozen statistics before spinning up workers.
    run_trial(0)?;

    let mut per_k = vec![0.0f64; n];
    let mut done = 0u64;
    while (done as usize) < samples {
        let chunk = TRIAL_CHUNK.min(samples as u64 - done);
        let range: Vec<u64> = (done..done + chunk).collect();
        let powers: Vec<_> = if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidParam(format!("worker pool: {e}")))?;
            pool.install(|| range.par_iter().map(|&t| run_trial(t)).collect::<Vec<_>>())
        } else {
            range.iter().map(|&t| run_trial(t)).collect()
        };
        for p in powers {
            for (acc, v) in per_k.iter_mut().zip(p?) {
                *acc += v;
            }
            done += 1;
        }
    }
    let per_k_power: Vec<f64> = per_k.iter().map(|&p| p / samples as f64).collect();
    let mean_total: f64 = per_k_power.iter().sum();
    Ok(PowerAudit {
        samples,
        mean_total_power: mean_total,
        per_k_power,
        deviation: (mean_total - n as f64).abs() / n as f64,
    })
}

/// Raw trained weights in channel-use order, for plotting.
#[derive(Clone, Debug)]
pub struct WeightReport {
    /// w_k^2 per channel use.
    pub power_w_sq: Vec<f64>,
    /// Effective forward merge weights (the trained attention weights in
    /// cases 4/5, the fixed masks otherwise).
    pub attn_f: Vec<f64>,
    /// Backward weights; absent for uni-directional decoders.
    pub attn_b: Option<Vec<f64>>,
}

pub fn weight_report<S: Scalar>(enc: &EncoderModel<S>, dec: &DecoderModel<S>) -> WeightReport {
    let n = enc.n_uses;
    WeightReport {
        power_w_sq: (0..n)
            .map(|k| {
                let w = enc.power_w.get(0, k).to_f64().unwrap();
                w * w
            })
            .collect(),
        attn_f: (0..n)
            .map(|k| dec.merge_weight_fwd(k, n).to_f64().unwrap())
            .collect(),
        attn_b: match dec.direction {
            crate::decoder::Direction::Bi => Some(
                (0..n)
                    .map(|k| dec.merge_weight_bwd(k, n).to_f64().unwrap())
                    .collect(),
            ),
            crate::decoder::Direction::Uni => None,
        },
    }
}

/// Feedback-noise sweep grid (linear variance units).
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub sigma2_grid: Vec<f64>,
    pub stop: StoppingRule,
}

/// One report per (scheme, sigma2) cell. Schemes that ignore feedback are
/// evaluated once and their row replicated across the grid.
pub fn sweep<S: Scalar>(
    codecs: &[&dyn Codec<S>],
    spec: &SweepSpec,
    base: &NoiseParams,
    seed: u64,
    workers: usize,
) -> Result<Vec<EvalReport>> {
    if spec.sigma2_grid.is_empty() {
        return Err(Error::InvalidParam("sweep grid must be non-empty".into()));
    }
    if spec.sigma2_grid.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParam("sweep grid values must be >= 0".into()));
    }
    let mut out = Vec::new();
    for codec in codecs {
        if codec.uses_feedback() {
            for &s2 in &spec.sigma2_grid {
                let params = NoiseParams::new(base.sigma1_sq, s2)?;
                out.push(monte_carlo(*codec, &params, &spec.stop, seed, workers)?);
            }
        } else {
            let params = NoiseParams::new(base.sigma1_sq, spec.sigma2_grid[0])?;
            let report = monte_carlo(*codec, &params, &spec.stop, seed, workers)?;
            for &s2 in &spec.sigma2_grid {
                let mut row = report.clone();
                row.sigma2_sq = s2;
                out.push(row);
            }
        }
    }
    Ok(out)
}

/// Full-precision scientific notation, round-trip safe.
pub fn fmt_full(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_header() -> String {
    "scheme,k,n,sigma1_sq,sigma2_sq,trials,block_errors,bit_errors,bler,bler_ci_lo,bler_ci_hi,ber,ber_ci_lo,ber_ci_hi,mean_total_power,per_k_power".to_string()
}

/// CSV serialization: comma-separated, header row, LF endings; the per-use
/// power vector is one semicolon-separated field.
pub fn to_csv(reports: &[EvalReport]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for r in reports {
        let per_k = r
            .per_k_power
            .iter()
            .map(|&p| fmt_full(p))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scheme,
            r.k,
            r.n,
            fmt_full(r.sigma1_sq),
            fmt_full(r.sigma2_sq),
            r.trials,
            r.block_errors,
            r.bit_errors,
            fmt_full(r.bler),
            fmt_full(r.bler_ci.0),
            fmt_full(r.bler_ci.1),
            fmt_full(r.ber),
            fmt_full(r.ber_ci.0),
            fmt_full(r.ber_ci.1),
            fmt_full(r.mean_total_power),
            per_k
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Test codec that decodes perfectly.
    struct IdentityCodec {
        k: usize,
        n: usize,
    }

    impl Codec<f64> for IdentityCodec {
        fn scheme_id(&self) -> String {
            "identity".into()
        }
        fn k_bits(&self) -> usize {
            self.k
        }
        fn n_uses(&self) -> usize {
            self.n
        }
        fn uses_feedback(&self) -> bool {
            false
        }
        fn run_episode(&self, b: &[u8], _: &ChannelInstance<f64>) -> Result<EpisodeOutcome> {
            Ok(EpisodeOutcome {
                b_hat: b.to_vec(),
                power: vec![1.0; self.n],
            })
        }
    }

    /// Test codec that guesses a deterministic pseudo-random message.
    struct RandomGuessCodec {
        k: usize,
        n: usize,
    }

    impl Codec<f64> for RandomGuessCodec {
        fn scheme_id(&self) -> String {
            "random-guess".into()
        }
        fn k_bits(&self) -> usize {
            self.k
        }
        fn n_uses(&self) -> usize {
            self.n
        }
        fn uses_feedback(&self) -> bool {
            false
        }
        fn run_episode(&self, _: &[u8], chan: &ChannelInstance<f64>) -> Result<EpisodeOutcome> {
            // Derive the guess from the noise realization so it is
            // independent of the message.
            let mut rng = RngStream::new(chan.n1[0].to_bits(), 0);
            Ok(EpisodeOutcome {
                b_hat: rng.bits(self.k),
                power: vec![1.0; self.n],
            })
        }
    }

    #[test]
    fn identity_codec_never_errs() {
        let params = NoiseParams::new(1.0, 0.0).unwrap();
        let stop = StoppingRule {
            target_errors: 10,
            max_trials: 2000,
        };
        let rep = monte_carlo(&IdentityCodec { k: 4, n: 8 }, &params, &stop, 7, 1).unwrap();
        assert_eq!(rep.block_errors, 0);
        assert_eq!(rep.trials, 2000);
        assert_eq!(rep.bler, 0.0);
        assert_eq!(rep.bler_ci.0, 0.0);
        assert!(rep.bler_ci.1 > 0.0);
    }

    #[test]
    fn random_guess_matches_bernoulli_oracle() {
        let params = NoiseParams::new(1.0, 0.0).unwrap();
        let stop = StoppingRule {
            target_errors: u64::MAX,
            max_trials: 100_000,
        };
        let rep = monte_carlo(&RandomGuessCodec { k: 4, n: 8 }, &params, &stop, 3, 1).unwrap();
        let p: f64 = 1.0 - 1.0 / 16.0;
        let se = (p * (1.0 - p) / 100_000.0).sqrt();
        assert!(
            (rep.bler - p).abs() < 3.0 * se,
            "bler {} vs oracle {p} (3se = {})",
            rep.bler,
            3.0 * se
        );
        // BER <= BLER <= K*BER bounds.
        assert!(rep.ber <= rep.bler + 1e-12);
        assert!(rep.bler <= 4.0 * rep.ber + 1e-12);
    }

    #[test]
    fn parallel_counts_equal_serial_counts() {
        let code = RepetitionCode::new(4, 12).unwrap();
        let params = NoiseParams::new(0.794, 0.0).unwrap();
        let stop = StoppingRule {
            target_errors: 50,
            max_trials: 20_000,
        };
        let serial = monte_carlo::<f64>(&code, &params, &stop, 11, 1).unwrap();
        let par = monte_carlo::<f64>(&code, &params, &stop, 11, 4).unwrap();
        assert_eq!(serial.trials, par.trials);
        assert_eq!(serial.block_errors, par.block_errors);
        assert_eq!(serial.bit_errors, par.bit_errors);
        assert_eq!(serial.per_k_power, par.per_k_power);
    }

    #[test]
    fn repetition_monte_carlo_matches_analytic() {
        let code = RepetitionCode::new(4, 12).unwrap();
        let params = NoiseParams::new(0.794, 0.0).unwrap();
        let stop = StoppingRule {
            target_errors: u64::MAX,
            max_trials: 100_000,
        };
        let rep = monte_carlo::<f64>(&code, &params, &stop, 19, 2).unwrap();
        let oracle = code.analytic_bler(0.794);
        let se = (oracle * (1.0 - oracle) / 100_000.0).sqrt();
        assert!(
            (rep.bler - oracle).abs() < 3.0 * se,
            "MC {} vs analytic {oracle}",
            rep.bler
        );
        // BPSK transmits at exactly unit power per use.
        assert!((rep.mean_total_power - 12.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_replicates_non_feedback_rows() {
        let code = RepetitionCode::new(2, 6).unwrap();
        let spec = SweepSpec {
            sigma2_grid: vec![0.01, 0.1, 1.0],
            stop: StoppingRule {
                target_errors: 20,
                max_trials: 2000,
            },
        };
        let base = NoiseParams::new(1.0, 0.01).unwrap();
        let rows = sweep::<f64>(&[&code], &spec, &base, 5, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].bler, rows[1].bler);
        assert_eq!(rows[0].trials, rows[2].trials);
        assert_eq!(rows[0].sigma2_sq, 0.01);
        assert_eq!(rows[2].sigma2_sq, 1.0);
    }
}
