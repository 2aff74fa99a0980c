//! SGD and Adam over a fixed, ordered list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `grads[i]` must match `params[i]` element-wise.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter of {} values, gradient of {}",
                    p.numel(),
                    g.len()
                )));
            }
        }
        self.step_count += 1;
        if let OptimizerKind::Adam { .. } = self.kind {
            if self.first_moment.is_empty() {
                self.first_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                self.second_moment = self.first_moment.clone();
            }
        }
        // lr 0 must be an exact no-op (x - 0.0 flips the sign of -0.0)
        if self.learning_rate == 0.0 {
            return Ok(());
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_bit_exact_noop() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut t = Tensor::new(vec![3], vec![-0.0, 1.5, -2.25]).unwrap();
            let before: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let mut opt = Optimizer::new(kind, 0.0);
            for _ in 0..3 {
                opt.step(&mut [&mut t], &[vec![0.3, -1.0, 2.0]]).unwrap();
            }
            let after: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut t = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        Optimizer::new(OptimizerKind::Sgd, 0.5)
            .step(&mut [&mut t], &[vec![1.0, -2.0]])
            .unwrap();
        assert_eq!(t.data(), &[0.5, 2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        Optimizer::new(OptimizerKind::adam(), 0.1)
            .step(&mut [&mut t], &[vec![3.0, -0.5]])
            .unwrap();
        assert!((t.data()[0] + 0.1).abs() < 1e-7);
        assert!((t.data()[1] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
