use std::collections::BTreeSet;
use std::f64::consts::PI;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    batch_loss, eval_batch_loss, make_batch, Batch, DenoiserConfig, DenoiserParams, LayerVars, NoiseSchedule,
    WeightVars,
};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{AdamConfig, Exec, Graph, NodeId, OptimizerState, Tensor};
use crate::world::{render_scene, ImageBuffer, PromptSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays along a half cosine to 10% of this value.
    pub learning_rate: f32,
    pub seed: u64,
    /// Fraction of the dataset held out for validation.
    pub val_fraction: f64,
    /// Noise draws per held-out image when computing validation loss.
    pub val_draws: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            val_fraction: 0.125,
            val_draws: 4,
            log_every: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub train_log: Vec<LossEntry>,
    pub train_images: usize,
    pub val_images: usize,
}

impl TrainReport {
    pub fn val_ratio(&self) -> f64 {
        self.final_val_loss / self.initial_val_loss
    }
}

/// `per_prompt` jittered renders of every prompt.
pub fn procedural_dataset(per_prompt: usize, height: usize, width: usize, seed: u64) -> Vec<(PromptSpec, ImageBuffer)> {
    let mut out = Vec::with_capacity(36 * per_prompt);
    for prompt in PromptSpec::all() {
        for k in 0..per_prompt {
            let s = seed::derive(seed, &[prompt.ordinal() as u64, k as u64]);
            out.push((prompt, render_scene(&prompt, s, height, width)));
        }
    }
    out
}

/// Cosine decay from `peak` to `0.1·peak`.
pub(crate) fn cosine_lr(peak: f32, step: usize, total: usize) -> f32 {
    let progress = step as f64 / total.max(1) as f64;
    (peak as f64 * (0.1 + 0.9 * 0.5 * (1.0 + (PI * progress).cos()))) as f32
}

/// Registers every denoiser tensor as a trainable leaf, in `tensors()` order.
pub(crate) fn param_vars(g: &mut Graph<f32>, params: &DenoiserParams) -> (WeightVars<NodeId>, Vec<NodeId>) {
    let mut ids = Vec::new();
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let weight = g.param(l.weight.clone());
            let bias = g.param(l.bias.clone());
            ids.push(weight);
            ids.push(bias);
            LayerVars {
                weight,
                bias,
                lora: None,
            }
        })
        .collect();
    let token_embedding = g.param(params.token_embedding.clone());
    ids.push(token_embedding);
    (
        WeightVars {
            layers,
            token_embedding,
        },
        ids,
    )
}

fn validation_batches(
    schedule: &NoiseSchedule,
    val: &[(PromptSpec, Tensor)],
    draws: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x7a1]));
    let items: Vec<(PromptSpec, &Tensor)> = val.iter().map(|(p, t)| (*p, t)).collect();
    (0..draws.max(1))
        .map(|_| make_batch(schedule, &items, &mut rng))
        .collect()
}

fn mean_loss(params: &DenoiserParams, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += eval_batch_loss(params, None, b)?;
    }
    Ok(total / batches.len() as f64)
}

/// Trains a denoiser from scratch on `(prompt, image)` pairs.
///
/// A deterministic slice of the data (every image whose index falls on the
/// validation stride) is held out; validation loss uses fixed noise draws so
/// the initial and final values are directly comparable.
pub fn train_base(
    dataset: &[(PromptSpec, ImageBuffer)],
    model: DenoiserConfig,
    config: &TrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    let schedule = &model.schedule;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    let distinct: BTreeSet<PromptSpec> = dataset.iter().map(|(p, _)| *p).collect();
    if distinct.len() < PromptSpec::all().len() {
        return Err(Error::Contract(format!(
            "dataset covers {} of {} prompts",
            distinct.len(),
            PromptSpec::all().len()
        )));
    }
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::Contract(
            "train config needs steps ≥ 1 and batch_size ≥ 1".into(),
        ));
    }
    for (_, img) in dataset {
        if img.height() != model.height || img.width() != model.width {
            return Err(Error::shape(
                "train_base",
                format!(
                    "image {}×{} vs model {}×{}",
                    img.height(),
                    img.width(),
                    model.height,
                    model.width
                ),
            ));
        }
    }

    let stride = (1.0 / config.val_fraction.clamp(1e-3, 0.5)).round() as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, (p, img)) in dataset.iter().enumerate() {
        let flat = img.to_model_space().reshape(&[model.pixels()])?;
        if i % stride == stride - 1 {
            val.push((*p, flat));
        } else {
            train.push((*p, flat));
        }
    }
    if val.is_empty() {
        val.push(train.pop().expect("non-empty dataset"));
    }

    let mut params = DenoiserParams::init(model, seed::derive(config.seed, &[0x1417]))?;
    let val_batches = validation_batches(schedule, &val, config.val_draws, config.seed)?;
    let initial_val_loss = mean_loss(&params, &val_batches)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[0x57e9]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut opt = OptimizerState::new(
        AdamConfig::with_lr(config.learning_rate),
        &params.tensors().iter().map(|(_, t)| *t).collect::<Vec<_>>(),
    );
    let mut log = Vec::new();
    let mut g = Graph::<f32>::new();

    for step in 0..config.steps {
        let mut items = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (p, t) = &train[order[cursor]];
            items.push((*p, t));
            cursor += 1;
        }
        let batch = make_batch(schedule, &items, &mut rng)?;

        g.reset();
        let (vars, ids) = param_vars(&mut g, &params);
        let loss_node = batch_loss(&mut g, &model, &vars, &batch)?;
        let loss = g.value(&loss_node).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged at step {step}")));
        }
        let grads = g.backward(loss_node)?;
        let grad_refs: Vec<&Tensor> = ids.iter().map(|&id| grads.get(id).expect("param gradient")).collect();
        opt.config.learning_rate = cosine_lr(config.learning_rate, step, config.steps);
        opt.adam_step(&mut params.tensors_mut(), &grad_refs)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;

        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            debug!("train_base step {step} loss {loss:.5}");
            log.push(LossEntry { step, loss });
        }
    }

    let final_val_loss = mean_loss(&params, &val_batches)?;
    Ok((
        params,
        TrainReport {
            initial_val_loss,
            final_val_loss,
            train_log: log,
            train_images: train.len(),
            val_images: val.len(),
        },
    ))
}
