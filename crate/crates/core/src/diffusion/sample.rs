use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserParams, NoisePredictor, NoiseSchedule, ScheduleMode};
use crate::error::{Error, Result};
use crate::lora::LoraParams;
use crate::seed;
use crate::tensor::Tensor;
use crate::world::{ImageBuffer, PromptSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self { steps, seed }
    }
}

/// The starting noise for a seed; identical for every model and prompt.
pub fn initial_noise(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x1a17]));
    Tensor::from_fn(&[height, width], |_| rng.sample::<f32, _>(StandardNormal))
}

/// Samples an image from `θ` (optionally `θ ⊕ φ`).
pub fn sample(
    params: &DenoiserParams,
    lora: Option<&LoraParams>,
    prompt: &PromptSpec,
    sampler: &SamplerConfig,
) -> Result<ImageBuffer> {
    let model = Denoiser::with_lora(params, lora)?;
    let cfg = params.config;
    sample_with(&cfg.schedule, sampler, cfg.height, cfg.width, |t, x| {
        model.predict(prompt, t, x)
    })
}

/// Runs the solver with an arbitrary network-output function
/// `predict(model_time, state)`.
///
/// Flow mode integrates `dx/dt = ε − h` with Euler steps from `t = 1` to
/// `t = 0`. Discrete mode runs ancestral sampling over an evenly strided
/// subset of the schedule's steps. The result is clamped to `[0, 1]`.
pub fn sample_with<F>(
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    height: usize,
    width: usize,
    mut predict: F,
) -> Result<ImageBuffer>
where
    F: FnMut(f32, &Tensor) -> Result<Tensor>,
{
    if sampler.steps == 0 {
        return Err(Error::Contract("sampler needs at least one step".into()));
    }
    schedule.validate()?;
    let mut x = initial_noise(sampler.seed, height, width);
    match schedule.mode {
        ScheduleMode::Flow => {
            let n = sampler.steps;
            for i in 0..n {
                let t = 1.0 - i as f64 / n as f64;
                let t_next = 1.0 - (i + 1) as f64 / n as f64;
                let v = predict(t as f32, &x)?;
                let dt = (t - t_next) as f32;
                x = x.zip_map(&v, "euler_step", |xv, vv| xv - dt * vv)?;
            }
        }
        ScheduleMode::Ddpm => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(sampler.seed, &[0xa5ce]));
            let steps = ddpm_timesteps(schedule.ddpm_steps, sampler.steps);
            for (k, &t) in steps.iter().enumerate() {
                let (alpha, _) = schedule.eval(t as f64)?;
                let signal = 1.0 - alpha;
                let eps = predict(schedule.model_time(t as f64), &x)?;
                let x0 = x.zip_map(&eps, "ddpm_x0", |xv, ev| {
                    ((xv as f64 - alpha.sqrt() * ev as f64) / signal.sqrt()).clamp(-1.0, 1.0) as f32
                })?;
                let Some(&t_prev) = steps.get(k + 1) else {
                    x = x0;
                    break;
                };
                let signal_prev = 1.0 - schedule.eval(t_prev as f64)?.0;
                let beta = (1.0 - signal / signal_prev).clamp(1e-12, 1.0);
                let c0 = signal_prev.sqrt() * beta / (1.0 - signal);
                let ct = (1.0 - beta).sqrt() * (1.0 - signal_prev) / (1.0 - signal);
                let sd = (beta * (1.0 - signal_prev) / (1.0 - signal)).sqrt();
                let mut next = x0.zip_map(&x, "ddpm_posterior", |a, b| (c0 * a as f64 + ct * b as f64) as f32)?;
                for v in next.data_mut() {
                    *v += (sd * rng.sample::<f64, _>(StandardNormal)) as f32;
                }
                x = next;
            }
        }
    }
    if !x.is_finite() {
        return Err(Error::Numerical("sampler produced non-finite values".into()));
    }
    ImageBuffer::from_model_space(&x)
}

/// Evenly spaced descending steps from `total` to 1, without repeats.
fn ddpm_timesteps(total: usize, n: usize) -> Vec<usize> {
    let n = n.min(total);
    let mut out: Vec<usize> = (0..n)
        .map(|i| {
            if n == 1 {
                total
            } else {
                (total as f64 - (total - 1) as f64 * i as f64 / (n - 1) as f64).round() as usize
            }
        })
        .collect();
    out.dedup();
    out
}
