//! Deterministic random streams and the closed-loop AWGN channel.
//!
//! Every random draw in the lab flows from a [`RngStream`] identified by a
//! `(seed, stream_id)` pair. Streams are counter-based (SplitMix64 over a
//! per-stream key), so stream `i` of a given seed always produces the same
//! sequence no matter how many other streams were consumed, which makes
//! parallel Monte Carlo bit-reproducible: trial `i` simply owns stream `i`.
//!
//! Gaussians come from the inverse-CDF transform
//! ([`crate::stats::inverse_normal_cdf`]) applied to one uniform per draw;
//! this choice is frozen because it keeps the draw count predictable.

use crate::scalar::Scalar;
use crate::stats::inverse_normal_cdf;
use crate::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based pseudo-random stream.
///
/// Identical `(seed, stream_id)` reproduce identical draws; distinct
/// `stream_id`s give statistically independent sequences.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(mix64(seed ^ GOLDEN) ^ stream_id.wrapping_mul(0xD134_2543_DE82_EF95));
        RngStream { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in the open interval (0, 1), 53-bit resolution.
    pub fn next_uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw via the inverse CDF; one uniform consumed.
    pub fn next_standard_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.next_uniform())
    }

    /// Fair bit.
    pub fn next_bit(&mut self) -> u8 {
        (self.next_u64() >> 63) as u8
    }

    pub fn bits(&mut self, k: usize) -> Vec<u8> {
        (0..k).map(|_| self.next_bit()).collect()
    }

    /// `n` i.i.d. N(0, sigma_sq) draws. A zero variance short-circuits to
    /// exact zeros without consuming the stream.
    pub fn normal_vec<S: Scalar>(&mut self, n: usize, sigma_sq: f64) -> Vec<S> {
        if sigma_sq == 0.0 {
            return vec![S::zero(); n];
        }
        let sigma = sigma_sq.sqrt();
        (0..n)
            .map(|_| S::from(sigma * self.next_standard_normal()).unwrap())
            .collect()
    }
}

/// Converts an SNR in decibels to the noise variance seen by unit-power
/// signals: SNR(dB) = -10 log10(sigma^2).
pub fn snr_db_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Forward and feedback noise powers for one channel configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

impl NoiseParams {
    /// `sigma2_sq = 0` is allowed and models noiseless feedback.
    pub fn new(sigma1_sq: f64, sigma2_sq: f64) -> Result<Self> {
        if !(sigma1_sq > 0.0) || !sigma1_sq.is_finite() {
            return Err(Error::InvalidParam(format!(
                "forward noise variance must be positive, got {sigma1_sq}"
            )));
        }
        if !(sigma2_sq >= 0.0) || !sigma2_sq.is_finite() {
            return Err(Error::InvalidParam(format!(
                "feedback noise variance must be non-negative, got {sigma2_sq}"
            )));
        }
        Ok(NoiseParams { sigma1_sq, sigma2_sq })
    }
}

/// Noise realizations for one N-use episode.
#[derive(Clone, Debug)]
pub struct ChannelInstance<S> {
    pub n1: Vec<S>,
    pub n2: Vec<S>,
    pub params: NoiseParams,
}

impl<S: Scalar> ChannelInstance<S> {
    pub fn n_uses(&self) -> usize {
        self.n1.len()
    }
}

/// Draws the i.i.d. Gaussian noise vectors for one episode. Draw order is
/// fixed: all of `n1`, then all of `n2`.
pub fn sample_channel<S: Scalar>(
    rng: &mut RngStream,
    n_uses: usize,
    params: &NoiseParams,
) -> Result<ChannelInstance<S>> {
    if n_uses == 0 {
        return Err(Error::InvalidParam("n_uses must be at least 1".into()));
    }
    if !(params.sigma1_sq > 0.0) {
        return Err(Error::InvalidParam(format!(
            "forward noise variance must be positive, got {}",
            params.sigma1_sq
        )));
    }
    let n1 = rng.normal_vec(n_uses, params.sigma1_sq);
    let n2 = rng.normal_vec(n_uses, params.sigma2_sq);
    Ok(ChannelInstance {
        n1,
        n2,
        params: *params,
    })
}

/// y[k] = x[k] + n1[k]
#[inline]
pub fn forward_step<S: Scalar>(x_k: S, n1_k: S) -> S {
    x_k + n1_k
}

/// z[k] = y[k] + n2[k]
#[inline]
pub fn feedback_step<S: Scalar>(y_k: S, n2_k: S) -> S {
    y_k + n2_k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_conversions() {
        assert!((snr_db_to_noise_var(1.0) - 0.794).abs() < 0.001);
        assert!((snr_db_to_noise_var(-1.0) - 1.259).abs() < 0.002);
        assert_eq!(snr_db_to_noise_var(0.0), 1.0);
    }

    #[test]
    fn trivial_channel_steps() {
        assert_eq!(forward_step(1.5, -0.5), 1.0);
        assert_eq!(forward_step(0.0, 0.0), 0.0);
        assert_eq!(forward_step(-2.0, 0.3), -1.7);
        assert_eq!(feedback_step(1.0, 0.1), 1.1);
        assert_eq!(feedback_step(0.73, 0.0), 0.73);
        assert_eq!(feedback_step(-0.4, -0.6), -1.0);
    }

    #[test]
    fn shapes_and_noiseless_feedback() {
        let params = NoiseParams::new(0.794, 0.01).unwrap();
        let mut rng = RngStream::new(7, 0);
        let chan: ChannelInstance<f64> = sample_channel(&mut rng, 18, &params).unwrap();
        assert_eq!(chan.n1.len(), 18);
        assert_eq!(chan.n2.len(), 18);

        let params0 = NoiseParams::new(1.0, 0.0).unwrap();
        let mut rng = RngStream::new(7, 0);
        let chan: ChannelInstance<f64> = sample_channel(&mut rng, 18, &params0).unwrap();
        assert!(chan.n2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_variances() {
        assert!(NoiseParams::new(0.0, 0.1).is_err());
        assert!(NoiseParams::new(-1.0, 0.1).is_err());
        assert!(NoiseParams::new(1.0, -0.1).is_err());
        let mut rng = RngStream::new(1, 0);
        let bad = NoiseParams {
            sigma1_sq: 0.0,
            sigma2_sq: 0.0,
        };
        assert!(sample_channel::<f64>(&mut rng, 4, &bad).is_err());
    }

    #[test]
    fn reproducible_and_stream_separated() {
        let params = NoiseParams::new(1.0, 0.5).unwrap();
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let ca: ChannelInstance<f64> = sample_channel(&mut a, 32, &params).unwrap();
        let cb: ChannelInstance<f64> = sample_channel(&mut b, 32, &params).unwrap();
        assert_eq!(ca.n1, cb.n1);
        assert_eq!(ca.n2, cb.n2);

        let mut c = RngStream::new(42, 4);
        let cc: ChannelInstance<f64> = sample_channel(&mut c, 32, &params).unwrap();
        assert_ne!(ca.n1, cc.n1);
    }

    #[test]
    fn moments_over_a_million_draws() {
        let mut rng = RngStream::new(11, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = rng.next_standard_normal();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        // 4 sigma / sqrt(n) on the mean, and the spec's +-0.01 on variance.
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean={mean}");
        assert!((var - 1.0).abs() < 0.01, "var={var}");
    }

    #[test]
    fn streams_uncorrelated() {
        let mut a = RngStream::new(5, 0);
        let mut b = RngStream::new(5, 1);
        let n = 1_000_000;
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.next_standard_normal();
            let y = b.next_standard_normal();
            sa += x;
            sb += y;
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let rho = cov / ((saa / nf - (sa / nf).powi(2)).sqrt() * (sbb / nf - (sb / nf).powi(2)).sqrt());
        assert!(rho.abs() < 0.01, "rho={rho}");
    }

    #[test]
    fn kolmogorov_smirnov_against_normal() {
        use crate::stats::normal_cdf;
        let mut rng = RngStream::new(123, 9);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| rng.next_standard_normal()).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let f = normal_cdf(x);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((f - lo).abs()).max((hi - f).abs());
        }
        assert!(d < 0.01, "KS statistic {d}");
    }
}
