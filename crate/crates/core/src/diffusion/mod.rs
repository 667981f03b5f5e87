//! Pixel-space denoiser: noise schedules, the MLP noise predictor, losses,
//! base training and sampling.

mod model;
mod sample;
mod schedule;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lora::LoraParams;
use crate::tensor::{Element, Exec, Tensor};
use crate::world::PromptSpec;

pub use model::{
    constant_vars, denoise_predict, forward, Conditioning, CountingPredictor, Denoiser, DenoiserConfig, DenoiserParams,
    LayerVars, Linear, NoisePredictor, WeightVars,
};
pub use sample::{initial_noise, sample, sample_with, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleMode};
pub use train::{procedural_dataset, train_base, LossEntry, TrainConfig, TrainReport};

/// One regression problem per row: noisy input, target and conditioning.
#[derive(Clone, Debug)]
pub struct Batch<E: Element = f32> {
    pub prompts: Vec<PromptSpec>,
    /// Network-facing timesteps in `[0, 1]`.
    pub times: Vec<f32>,
    /// `[B, H·W]`
    pub noisy: Tensor<E>,
    /// `[B, H·W]`
    pub target: Tensor<E>,
    /// Per-batch loss weight `w_t`. Unit for both built-in schedules.
    pub weight: f64,
}

impl<E: Element> Batch<E> {
    pub fn cast<F: Element>(&self) -> Batch<F> {
        Batch {
            prompts: self.prompts.clone(),
            times: self.times.clone(),
            noisy: self.noisy.cast(),
            target: self.target.cast(),
            weight: self.weight,
        }
    }
}

/// Draws `t ~ 𝒯` and `ε ~ N(0, I)` for every clean image and builds the
/// noisy inputs and targets.
pub fn make_batch<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    items: &[(PromptSpec, &Tensor)],
    rng: &mut R,
) -> Result<Batch> {
    let Some((_, first)) = items.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    let d = first.numel();
    let mut noisy = Vec::with_capacity(items.len() * d);
    let mut target = Vec::with_capacity(items.len() * d);
    let mut times = Vec::with_capacity(items.len());
    let mut weight = 0.0;
    for (_, h) in items {
        let t = schedule.sample_timestep(rng);
        let eps = Tensor::from_fn(h.shape(), |_| rng.sample::<f32, _>(StandardNormal));
        noisy.extend_from_slice(schedule.noisy_state(h, &eps, t)?.data());
        target.extend_from_slice(schedule.target(h, &eps)?.data());
        times.push(schedule.model_time(t));
        weight += schedule.eval(t)?.1;
    }
    let b = items.len();
    Ok(Batch {
        prompts: items.iter().map(|(p, _)| *p).collect(),
        times,
        noisy: Tensor::new(vec![b, d], noisy)?,
        target: Tensor::new(vec![b, d], target)?,
        weight: weight / b as f64,
    })
}

/// Mean per-element weighted squared error of the network on a batch, as a
/// node of `ex`. This is the per-sample loss divided by `B·H·W`.
pub fn batch_loss<E: Element, X: Exec<E>>(
    ex: &mut X,
    config: &DenoiserConfig,
    weights: &WeightVars<X::Var>,
    batch: &Batch<E>,
) -> Result<X::Var> {
    let cond = Conditioning::new(config, &batch.prompts, &batch.times)?;
    let x = ex.constant(batch.noisy.clone());
    let pred = forward(ex, config, weights, &cond, &x)?;
    let target = ex.constant(batch.target.clone());
    let se = ex.squared_error(&pred, &target)?;
    let norm = ex.constant(Tensor::scalar(E::lit(batch.weight / batch.noisy.numel() as f64)));
    ex.mul(&se, &norm)
}

/// Evaluates [`batch_loss`] without recording anything.
pub fn eval_batch_loss(params: &DenoiserParams, lora: Option<&LoraParams>, batch: &Batch) -> Result<f64> {
    let d = Denoiser::with_lora(params, lora)?;
    let pred = d.predict_batch(&batch.prompts, &batch.times, &batch.noisy)?;
    let se: f64 = pred
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(&p, &t)| ((p - t) as f64).powi(2))
        .sum();
    let loss = batch.weight * se / batch.noisy.numel() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// The single-sample objective: flow `w_t·‖ε̂(P,t,h_t) − ε + h‖²`, ddpm
/// `‖ε̂(P,t,h_t) − ε‖²`, with `h_t` the forward-noised `h`. Shapes are
/// `[H, W]`.
pub fn training_loss(
    params: &DenoiserParams,
    lora: Option<&LoraParams>,
    prompt: &PromptSpec,
    t: f64,
    h: &Tensor,
    eps: &Tensor,
) -> Result<f64> {
    let schedule = &params.config.schedule;
    let h_t = schedule.noisy_state(h, eps, t)?;
    let pred = denoise_predict(params, lora, prompt, schedule.model_time(t), &h_t)?;
    loss_from_prediction(schedule, t, &pred, h, eps)
}

/// The objective for an already computed network output.
pub fn loss_from_prediction(schedule: &NoiseSchedule, t: f64, pred: &Tensor, h: &Tensor, eps: &Tensor) -> Result<f64> {
    let (_, w) = schedule.eval(t)?;
    let target = schedule.target(h, eps)?;
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "training_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let se: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &q)| ((p - q) as f64).powi(2))
        .sum();
    let loss = w * se;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss at t={t}")));
    }
    Ok(loss)
}
