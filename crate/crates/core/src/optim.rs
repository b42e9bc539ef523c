//! Adam optimizer and global-norm gradient clipping.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Adam accumulators. One `m`/`v` pair per parameter tensor, indexed in the
/// same fixed order as the parameter list handed to [`AdamState::step`].
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
}

impl<S: Scalar> AdamState<S> {
    /// beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(shapes: &[(usize, usize)], lr: S) -> Self {
        AdamState {
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step: 0,
            lr,
            beta1: S::from(0.9).unwrap(),
            beta2: S::from(0.999).unwrap(),
            epsilon: S::from(1e-8).unwrap(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Standard Adam update with bias correction. Any NaN gradient aborts
    /// with a divergence error before touching parameters or accumulators.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "adam param count");
        assert_eq!(grads.len(), self.m.len(), "adam grad count");
        for g in grads {
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::Divergence("NaN gradient in Adam step".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let one = S::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam shape mismatch");
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over a gradient set, accumulated in index order.
pub fn global_norm<S: Scalar>(grads: &[Tensor<S>]) -> S {
    grads
        .iter()
        .fold(S::zero(), |acc, g| acc + g.sq_sum())
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`; otherwise leaves them untouched. Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: S) -> S {
    assert!(max_norm > S::zero(), "clip norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_leaves_small_gradients_untouched() {
        let mut grads = vec![Tensor::row_vec(vec![0.3, 0.4])]; // norm 0.5
        let before = grads[0].clone();
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads[0], before);
    }

    #[test]
    fn clip_rescales_to_unit_norm() {
        let mut grads: Vec<Tensor<f64>> = vec![Tensor::row_vec(vec![3.0, 4.0])]; // norm 5
        clip_global_norm(&mut grads, 1.0);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((grads[0].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_zero_is_zero() {
        let mut grads = vec![Tensor::<f64>::zeros(2, 2)];
        clip_global_norm(&mut grads, 1.0);
        assert!(grads[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::row_vec(vec![1.5, -2.5]);
        let before = p.clone();
        let mut adam = AdamState::new(&[(1, 2)], 0.01);
        adam.step(&mut [&mut p], &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p: Tensor<f64> = Tensor::scalar(0.0);
        let mut adam = AdamState::new(&[(1, 1)], 0.01);
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // Bias-corrected first step: -lr * 1 / (1 + eps).
        assert!((p.item() + 0.01).abs() < 1e-9, "step was {}", p.item());
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(&[(1, 1)], 0.01);
        let err = adam.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]);
        assert!(err.is_err());
        assert_eq!(p.item(), 0.0);
    }

    #[test]
    fn adam_deterministic_over_100_steps() {
        let run = || {
            let mut p = Tensor::row_vec(vec![0.5, -0.25, 1.0]);
            let mut adam = AdamState::new(&[(1, 3)], 0.01);
            for i in 0..100 {
                let g = Tensor::row_vec(vec![
                    (i as f64 * 0.01).sin(),
                    0.5 - (i as f64 * 0.02),
                    1.0 / (1.0 + i as f64),
                ]);
                adam.step(&mut [&mut p], &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
