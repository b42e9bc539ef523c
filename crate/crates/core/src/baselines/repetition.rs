//! Repetition coding with BPSK: each bit is sent N/K times at unit power
//! (bit 1 -> +1, bit 0 -> -1) and decoded by the sign of the per-bit sum
//! of receive values. The analytic error rates act as the oracle for the
//! Monte Carlo estimator.

use crate::scalar::Scalar;
use crate::stats::q_function;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct RepetitionCode {
    pub k: usize,
    pub n: usize,
}

impl RepetitionCode {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        if k == 0 || n == 0 || n % k != 0 {
            return Err(Error::InvalidParam(format!(
                "repetition coding needs K | N, got K={k}, N={n}"
            )));
        }
        Ok(RepetitionCode { k, n })
    }

    pub fn reps(&self) -> usize {
        self.n / self.k
    }

    /// Bit-major BPSK codeword: bit i occupies uses i*reps..(i+1)*reps.
    pub fn encode<S: Scalar>(&self, b: &[u8]) -> Vec<S> {
        assert_eq!(b.len(), self.k, "bit count");
        let reps = self.reps();
        let mut x = Vec::with_capacity(self.n);
        for &bit in b {
            let sym = if bit == 1 { S::one() } else { -S::one() };
            x.extend(std::iter::repeat(sym).take(reps));
        }
        x
    }

    /// Sign decision on the per-bit sum; a sum of exactly zero decides 0.
    pub fn decode<S: Scalar>(&self, y: &[S]) -> Vec<u8> {
        assert_eq!(y.len(), self.n, "receive length");
        let reps = self.reps();
        (0..self.k)
            .map(|i| {
                let sum = y[i * reps..(i + 1) * reps]
                    .iter()
                    .fold(S::zero(), |a, &v| a + v);
                if sum > S::zero() {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Analytic per-bit error probability Q(sqrt(reps / sigma1_sq)).
    pub fn analytic_bit_error(&self, sigma1_sq: f64) -> f64 {
        q_function((self.reps() as f64 / sigma1_sq).sqrt())
    }

    /// Analytic block error rate 1 - (1 - p)^K.
    pub fn analytic_bler(&self, sigma1_sq: f64) -> f64 {
        1.0 - (1.0 - self.analytic_bit_error(sigma1_sq)).powi(self.k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_round_trip() {
        let code = RepetitionCode::new(4, 12).unwrap();
        for msg in 0..16usize {
            let b = crate::decoder::index_to_bits(msg, 4);
            let x: Vec<f64> = code.encode(&b);
            assert_eq!(code.decode(&x), b);
        }
    }

    #[test]
    fn sign_rule() {
        // Decoding works on per-bit sums; [1.9, -0.3] maps to bits 1, 0.
        let code = RepetitionCode::new(2, 6).unwrap();
        let y = vec![1.9 / 3.0, 1.9 / 3.0, 1.9 / 3.0, -0.1, -0.1, -0.1];
        assert_eq!(code.decode(&y), vec![1, 0]);
        // Exactly zero decides 0.
        let y = vec![0.0; 6];
        assert_eq!(code.decode(&y), vec![0, 0]);
    }

    #[test]
    fn rejects_non_dividing_k() {
        assert!(RepetitionCode::new(4, 13).is_err());
        assert!(RepetitionCode::new(0, 12).is_err());
    }

    #[test]
    fn analytic_values_at_the_desk_point() {
        // K=4, reps=3, sigma1^2=0.794: p = Q(sqrt(3.778)) ~ 0.026 and
        // BLER = 1-(1-p)^4 ~ 0.10.
        let code = RepetitionCode::new(4, 12).unwrap();
        let p = code.analytic_bit_error(0.794);
        assert!((p - 0.026).abs() < 0.001, "p = {p}");
        let bler = code.analytic_bler(0.794);
        assert!((bler - 0.10).abs() < 0.005, "bler = {bler}");
    }
}
