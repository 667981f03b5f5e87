use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam update. Parameters are left untouched if any gradient is
    /// not finite.
    pub fn adam_step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} moments, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {i}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - (beta1 as f64).powi(t);
        let c2 = 1.0 - (beta2 as f64).powi(t);
        let step_size = (learning_rate as f64 / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = w.clone();
        let g = Tensor::zeros(&[3]);
        let mut opt = OptimizerState::new(AdamConfig::default(), &[&w]);
        for _ in 0..5 {
            opt.adam_step(&mut [&mut w], &[&g]).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² at t=1, so Δw = -lr·g/(|g| + eps).
        let mut w = Tensor::zeros(&[1]);
        let g = Tensor::full(&[1], 1.0);
        let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-4), &[&w]);
        opt.adam_step(&mut [&mut w], &[&g]).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((w.item() as f64 - expected).abs() < 1e-9, "{}", w.item());
    }

    #[test]
    fn constant_gradient_descends() {
        let mut w = Tensor::zeros(&[2]);
        let g = Tensor::new(vec![2], vec![0.3, -2.0]).unwrap();
        let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-2), &[&w]);
        for _ in 0..100 {
            opt.adam_step(&mut [&mut w], &[&g]).unwrap();
        }
        assert!(w.data()[0] < 0.0 && w.data()[1] > 0.0);
    }

    #[test]
    fn nan_gradient_is_rejected_without_update() {
        let mut w = Tensor::full(&[2], 1.0);
        let g = Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap();
        let mut opt = OptimizerState::new(AdamConfig::default(), &[&w]);
        assert!(matches!(opt.adam_step(&mut [&mut w], &[&g]), Err(Error::Numerical(_))));
        assert_eq!(w, Tensor::full(&[2], 1.0));
        assert_eq!(opt.steps_taken(), 0);
    }
}
