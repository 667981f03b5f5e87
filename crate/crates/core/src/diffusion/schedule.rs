use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Rectified flow: `h_t = (1 − σ_t)·h + σ_t·ε`, target `ε − h`.
    Flow,
    /// Discrete diffusion: `h_t = √(1 − α_t)·h + √α_t·ε`, target `ε`, with
    /// `α_t` the noise fraction at step `t`.
    Ddpm,
}

/// Noise schedule for either formulation.
///
/// Flow uses `σ_t = t` on `[0, 1]`, `w_t = 1` and uniform timesteps. The
/// discrete mode uses a linear noise-fraction table over `steps` entries
/// (`t = 1..=steps`), uniform integer timesteps and unit weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub mode: ScheduleMode,
    pub ddpm_steps: usize,
    pub ddpm_alpha_start: f64,
    pub ddpm_alpha_end: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::flow()
    }
}

impl NoiseSchedule {
    pub fn flow() -> Self {
        Self {
            mode: ScheduleMode::Flow,
            ddpm_steps: 100,
            ddpm_alpha_start: 1e-3,
            ddpm_alpha_end: 0.999,
        }
    }

    pub fn ddpm() -> Self {
        Self {
            mode: ScheduleMode::Ddpm,
            ..Self::flow()
        }
    }

    pub fn for_mode(mode: ScheduleMode) -> Self {
        match mode {
            ScheduleMode::Flow => Self::flow(),
            ScheduleMode::Ddpm => Self::ddpm(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ScheduleMode::Ddpm {
            let ok = |a: f64| a > 0.0 && a < 1.0;
            if self.ddpm_steps < 2 || !ok(self.ddpm_alpha_start) || !ok(self.ddpm_alpha_end) {
                return Err(Error::Contract(format!(
                    "ddpm schedule needs ≥2 steps and noise fractions in (0,1): {self:?}"
                )));
            }
        }
        Ok(())
    }

    fn ddpm_alpha(&self, step: usize) -> f64 {
        let frac = (step - 1) as f64 / (self.ddpm_steps - 1) as f64;
        self.ddpm_alpha_start + (self.ddpm_alpha_end - self.ddpm_alpha_start) * frac
    }

    /// `(σ_t, w_t)` for flow or `(α_t, w_t)` for ddpm.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        match self.mode {
            ScheduleMode::Flow => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Contract(format!("flow timestep {t} outside [0, 1]")));
                }
                Ok((t, 1.0))
            }
            ScheduleMode::Ddpm => {
                let step = t as usize;
                if t.fract() != 0.0 || step < 1 || step > self.ddpm_steps {
                    return Err(Error::Contract(format!(
                        "ddpm timestep {t} outside 1..={}",
                        self.ddpm_steps
                    )));
                }
                Ok((self.ddpm_alpha(step), 1.0))
            }
        }
    }

    /// Draws a training timestep from 𝒯.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.mode {
            ScheduleMode::Flow => rng.random::<f64>(),
            ScheduleMode::Ddpm => rng.random_range(1..=self.ddpm_steps) as f64,
        }
    }

    /// Timestep as seen by the network, always in `[0, 1]`.
    pub fn model_time(&self, t: f64) -> f32 {
        match self.mode {
            ScheduleMode::Flow => t as f32,
            ScheduleMode::Ddpm => (t / self.ddpm_steps as f64) as f32,
        }
    }

    /// Inverse of [`NoiseSchedule::model_time`].
    pub fn from_model_time(&self, tm: f32) -> f64 {
        match self.mode {
            ScheduleMode::Flow => tm as f64,
            ScheduleMode::Ddpm => (tm as f64 * self.ddpm_steps as f64).round(),
        }
    }

    /// `(a, b)` with `h_t = a·h + b·ε`.
    pub fn mix(&self, t: f64) -> Result<(f64, f64)> {
        let (coef, _) = self.eval(t)?;
        Ok(match self.mode {
            ScheduleMode::Flow => (1.0 - coef, coef),
            ScheduleMode::Ddpm => ((1.0 - coef).sqrt(), coef.sqrt()),
        })
    }

    /// Network pre/post scaling `(c_in, c_skip, c_out)` at `t` for data of
    /// per-pixel standard deviation `sigma_data`.
    ///
    /// The output is `c_skip·h_t + c_out·F(c_in·h_t)`: `c_skip·h_t` is the
    /// best linear estimate of the target from `h_t` under a Gaussian data
    /// model, and `c_out` is the standard deviation of what remains, so the
    /// network `F` always regresses a unit-scale residual.
    pub fn preconditioning(&self, t: f64, sigma_data: f64) -> Result<(f64, f64, f64)> {
        let (a, b) = self.mix(t)?;
        let s2 = sigma_data * sigma_data;
        // target = p·ε + q·h
        let (p, q) = match self.mode {
            ScheduleMode::Flow => (1.0, -1.0),
            ScheduleMode::Ddpm => (1.0, 0.0),
        };
        let var_x = a * a * s2 + b * b;
        let cov = p * b + q * a * s2;
        let var_target = p * p + q * q * s2;
        let c_skip = cov / var_x;
        let c_out = (var_target - cov * c_skip).max(1e-12).sqrt();
        Ok((1.0 / var_x.sqrt(), c_skip, c_out))
    }

    /// Forward noising of a clean state.
    pub fn noisy_state(&self, h: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
        let (a, b) = self.mix(t)?;
        let (a, b) = (a as f32, b as f32);
        h.zip_map(eps, "noisy_state", |hv, ev| a * hv + b * ev)
    }

    /// Regression target of the network output.
    pub fn target(&self, h: &Tensor, eps: &Tensor) -> Result<Tensor> {
        match self.mode {
            ScheduleMode::Flow => eps.zip_map(h, "target", |e, x| e - x),
            ScheduleMode::Ddpm => {
                if eps.shape() != h.shape() {
                    return Err(Error::shape("target", format!("{:?} vs {:?}", h.shape(), eps.shape())));
                }
                Ok(eps.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f32) -> Tensor {
        Tensor::full(&[1], v)
    }

    #[test]
    fn flow_endpoints_and_midpoint() {
        let s = NoiseSchedule::flow();
        let h = Tensor::new(vec![3], vec![0.2, -0.5, 1.0]).unwrap();
        let e = Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        assert_eq!(s.noisy_state(&h, &e, 0.0).unwrap(), h);
        assert_eq!(s.noisy_state(&h, &e, 1.0).unwrap(), e);
        assert_eq!(s.noisy_state(&t1(2.0), &t1(0.0), 0.5).unwrap(), t1(1.0));
    }

    #[test]
    fn flow_schedule_values() {
        let s = NoiseSchedule::flow();
        assert_eq!(s.eval(0.0).unwrap(), (0.0, 1.0));
        assert_eq!(s.eval(0.25).unwrap(), (0.25, 1.0));
        assert_eq!(s.eval(1.0).unwrap(), (1.0, 1.0));
        assert!(s.eval(1.5).is_err());
        assert!(s.eval(-0.1).is_err());
    }

    #[test]
    fn flow_sigma_is_monotone() {
        let s = NoiseSchedule::flow();
        let mut last = -1.0;
        for i in 0..=100 {
            let (sigma, _) = s.eval(i as f64 / 100.0).unwrap();
            assert!(sigma >= last);
            last = sigma;
        }
    }

    #[test]
    fn ddpm_table() {
        let s = NoiseSchedule::ddpm();
        s.validate().unwrap();
        assert_eq!(s.eval(100.0).unwrap().0, s.ddpm_alpha_end);
        assert_eq!(s.eval(1.0).unwrap().0, s.ddpm_alpha_start);
        for t in 1..=100 {
            let a = s.eval(t as f64).unwrap().0;
            assert!(a > 0.0 && a < 1.0);
        }
        assert!(s.eval(0.0).is_err());
        assert!(s.eval(101.0).is_err());
        assert!(s.eval(2.5).is_err());
    }

    #[test]
    fn ddpm_forward_matches_formula() {
        let s = NoiseSchedule::ddpm();
        let a = s.eval(50.0).unwrap().0;
        let out = s.noisy_state(&t1(0.8), &t1(-0.3), 50.0).unwrap();
        let expected = (1.0 - a).sqrt() * 0.8 + a.sqrt() * -0.3;
        assert!((out.item() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn preconditioning_endpoints() {
        let s = NoiseSchedule::flow();
        let (c_in, c_skip, c_out) = s.preconditioning(0.0, 0.5).unwrap();
        assert!((c_in - 2.0).abs() < 1e-12 && (c_skip + 1.0).abs() < 1e-12 && (c_out - 1.0).abs() < 1e-12);
        let (c_in, c_skip, c_out) = s.preconditioning(1.0, 0.5).unwrap();
        assert!((c_in - 1.0).abs() < 1e-12 && (c_skip - 1.0).abs() < 1e-12 && (c_out - 0.5).abs() < 1e-12);
        for t in 1..=100 {
            let (c_in, c_skip, c_out) = NoiseSchedule::ddpm().preconditioning(t as f64, 0.5).unwrap();
            assert!(c_in.is_finite() && c_skip.is_finite() && c_out > 0.0);
        }
    }

    #[test]
    fn model_time_round_trips() {
        let d = NoiseSchedule::ddpm();
        for t in 1..=100 {
            assert_eq!(d.from_model_time(d.model_time(t as f64)), t as f64);
        }
        assert_eq!(NoiseSchedule::flow().from_model_time(0.25), 0.25);
    }

    #[test]
    fn invalid_ddpm_schedule_rejected() {
        let mut s = NoiseSchedule::ddpm();
        s.ddpm_alpha_end = 1.0;
        assert!(s.validate().is_err());
    }
}
