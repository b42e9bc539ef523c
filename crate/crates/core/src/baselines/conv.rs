//! Tail-biting convolutional coding with exact maximum-likelihood
//! soft-decision decoding.
//!
//! The code is (7, [133, 171, 165]) in octal, rate 1/3. Generators are
//! interpreted MSB-first over the 7 taps: the most significant bit of
//! each generator weights the current input bit, lower bits weight older
//! inputs. The encoder register starts loaded with the last 6 message
//! bits (cyclically for K < 6), which makes the start and end states
//! equal; decoding runs one start-state-constrained Viterbi pass per
//! state and keeps the globally best metric, which is exact ML because
//! every tail-biting path is scored.
//!
//! BPSK mapping for this codec: code bit 0 -> +1, code bit 1 -> -1.

use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ConvCode {
    pub constraint_len: usize,
    /// Generator polynomials as octal literals, e.g. [0o133, 0o171, 0o165].
    pub generators: Vec<u32>,
    pub tail_biting: bool,
}

impl ConvCode {
    /// The (7, [133, 171, 165]) rate-1/3 tail-biting code.
    pub fn lte_rate_third() -> Self {
        ConvCode {
            constraint_len: 7,
            generators: vec![0o133, 0o171, 0o165],
            tail_biting: true,
        }
    }

    pub fn rate_den(&self) -> usize {
        self.generators.len()
    }

    fn memory(&self) -> usize {
        self.constraint_len - 1
    }

    fn states(&self) -> usize {
        1 << self.memory()
    }

    /// State holds the previous `memory` inputs, most recent at the MSB.
    /// Output bit for generator `g` at input `bit` in state `s`.
    #[inline]
    fn output_bit(&self, g: u32, bit: u8, s: u32) -> u8 {
        let reg = ((bit as u32) << self.memory()) | s;
        ((reg & g).count_ones() & 1) as u8
    }

    #[inline]
    fn next_state(&self, bit: u8, s: u32) -> u32 {
        (s >> 1) | ((bit as u32) << (self.memory() - 1))
    }

    /// Initial register contents: the last `memory` message bits,
    /// b[K-1] at the MSB (cyclic indexing for K < memory).
    fn tail_bite_state(&self, b: &[u8]) -> u32 {
        let k = b.len();
        let m = self.memory();
        let mut s = 0u32;
        for j in 0..m {
            let bit = b[(k + k - 1 - j) % k]; // b[K-1-j] with wraparound
            s |= (bit as u32) << (m - 1 - j);
        }
        s
    }

    /// Raw code bits, rate_den() per input bit.
    pub fn encode_bits(&self, b: &[u8]) -> Vec<u8> {
        assert!(!b.is_empty(), "empty message");
        let mut s = if self.tail_biting {
            self.tail_bite_state(b)
        } else {
            0
        };
        let mut out = Vec::with_capacity(b.len() * self.rate_den());
        for &bit in b {
            for &g in &self.generators {
                out.push(self.output_bit(g, bit, s));
            }
            s = self.next_state(bit, s);
        }
        out
    }

    /// BPSK codeword (0 -> +1, 1 -> -1), unit power per use.
    pub fn encode<S: Scalar>(&self, b: &[u8]) -> Vec<S> {
        self.encode_bits(b)
            .into_iter()
            .map(|bit| if bit == 0 { S::one() } else { -S::one() })
            .collect()
    }

    /// Encoder state after processing all of `b` from the tail-biting
    /// start state (equals the start state by construction).
    pub fn final_state(&self, b: &[u8]) -> u32 {
        let mut s = self.tail_bite_state(b);
        for &bit in b {
            s = self.next_state(bit, s);
        }
        s
    }

    /// Exact ML tail-biting decode of a soft receive vector. Correlation
    /// metric (equivalent to minimum Euclidean distance for BPSK). Ties
    /// break toward the lower start state, then the lower predecessor
    /// state inside each add-compare-select (the input bit of a
    /// transition is implied by the destination state, so no further
    /// tie-break is needed).
    pub fn tbcc_decode<S: Scalar>(&self, y: &[S]) -> Result<Vec<u8>> {
        let den = self.rate_den();
        if y.len() % den != 0 || y.is_empty() {
            return Err(Error::Mismatch(format!(
                "receive length {} is not a positive multiple of {den}",
                y.len()
            )));
        }
        let k = y.len() / den;
        let yf: Vec<f64> = y.iter().map(|v| v.to_f64().unwrap()).collect();
        let n_states = self.states();
        let m = self.memory();

        // Branch correlation for (state, input) at step i.
        let branch = |i: usize, s: u32, bit: u8| -> f64 {
            let mut acc = 0.0;
            for (gi, &g) in self.generators.iter().enumerate() {
                let sym = if self.output_bit(g, bit, s) == 0 {
                    1.0
                } else {
                    -1.0
                };
                acc += yf[i * den + gi] * sym;
            }
            acc
        };

        let mut best: Option<(f64, Vec<u8>)> = None;
        for start in 0..n_states as u32 {
            let mut metric = vec![f64::NEG_INFINITY; n_states];
            metric[start as usize] = 0.0;
            // survivors[i][d] = dropped register bit of the chosen
            // predecessor of state d at step i.
            let mut survivors = vec![vec![0u8; n_states]; k];
            let mut next = vec![f64::NEG_INFINITY; n_states];
            for i in 0..k {
                next.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
                for s in 0..n_states as u32 {
                    let base = metric[s as usize];
                    if base == f64::NEG_INFINITY {
                        continue;
                    }
                    for bit in 0..2u8 {
                        let d = self.next_state(bit, s) as usize;
                        let cand = base + branch(i, s, bit);
                        // Strict > keeps the first (lowest-s) candidate
                        // on ties; s ascends in this loop.
                        if cand > next[d] {
                            next[d] = cand;
                            survivors[i][d] = (s & 1) as u8;
                        }
                    }
                }
                std::mem::swap(&mut metric, &mut next);
            }
            let end_metric = metric[start as usize];
            if end_metric == f64::NEG_INFINITY {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bm, _)) => end_metric > *bm,
            };
            if better {
                // Trace back from the constrained end state.
                let mut bits = vec![0u8; k];
                let mut d = start;
                for i in (0..k).rev() {
                    let input = ((d >> (m - 1)) & 1) as u8;
                    bits[i] = input;
                    let dropped = survivors[i][d as usize];
                    d = ((d << 1) & ((n_states as u32) - 1)) | dropped as u32;
                }
                best = Some((end_metric, bits));
            }
        }
        Ok(best.expect("at least one start state survives").1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::index_to_bits;

    #[test]
    fn all_zero_message_is_all_zero_codeword() {
        let code = ConvCode::lte_rate_third();
        let b = vec![0u8; 8];
        assert!(code.encode_bits(&b).iter().all(|&c| c == 0));
        let x: Vec<f64> = code.encode(&b);
        assert!(x.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tail_biting_start_equals_end() {
        let code = ConvCode::lte_rate_third();
        for msg in [0usize, 1, 77, 200, 255] {
            let b = index_to_bits(msg, 8);
            assert_eq!(code.final_state(&b), code.tail_bite_state(&b));
        }
    }

    #[test]
    fn weight_one_messages_have_large_distance() {
        // All weight-1 inputs at K=12: codeword weight is the total tap
        // weight of the three generators, which must be >= 10.
        let code = ConvCode::lte_rate_third();
        let k = 12;
        for pos in 0..k {
            let mut b = vec![0u8; k];
            b[pos] = 1;
            let w: usize = code.encode_bits(&b).iter().map(|&c| c as usize).sum();
            assert!(w >= 10, "weight-1 input at {pos} has codeword weight {w}");
        }
    }

    #[test]
    fn noiseless_round_trip_k8() {
        let code = ConvCode::lte_rate_third();
        for msg in 0..256usize {
            let b = index_to_bits(msg, 8);
            let x: Vec<f64> = code.encode(&b);
            assert_eq!(code.tbcc_decode(&x).unwrap(), b, "message {msg}");
        }
    }

    #[test]
    fn all_zero_receive_is_deterministic() {
        let code = ConvCode::lte_rate_third();
        let y = vec![0.0f64; 24];
        let first = code.tbcc_decode(&y).unwrap();
        for _ in 0..3 {
            assert_eq!(code.tbcc_decode(&y).unwrap(), first);
        }
        // The decision must be some valid message (its re-encoding is a
        // codeword by construction); determinism is the contract here.
        assert_eq!(first.len(), 8);
    }
}
