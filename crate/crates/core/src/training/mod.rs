//! Single-image LoRA fitting, the two-stage differential procedure, a
//! parallel per-pair job runner, and aggregation into one update.
//!
//! Stage one fits `φ₁` to the original image `X` on top of `θ`; stage two
//! fits a fresh `φ₂` to the improved image `X′` on top of `θ ⊕ φ₁`. Only
//! `φ₂` is kept, so it captures the difference between the two images
//! rather than their shared content.

use std::time::Instant;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::diffusion::{batch_loss, constant_vars, eval_batch_loss, make_batch, Batch, DenoiserParams, LossEntry};
use crate::error::{Error, Result};
use crate::lora::{lora_apply, lora_concat_scale, lora_init, LoraParams};
use crate::seed;
use crate::tensor::{AdamConfig, Exec, Graph, OptimizerState, Tensor};
use crate::world::{ImageBuffer, PromptSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f32,
    /// Noise draws of the single training image per step.
    pub batch_size: usize,
    pub rank: usize,
    /// Seeds timestep/noise sampling and the LoRA init.
    pub seed: u64,
    /// Fixed noise draws used to report the initial and final loss.
    pub eval_draws: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            learning_rate: 1e-4,
            batch_size: 1,
            rank: 8,
            seed: 0,
            eval_draws: 32,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rank == 0 || self.eval_draws == 0 {
            return Err(Error::Contract(
                "fit config needs batch_size, rank and eval_draws ≥ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: Vec<LossEntry>,
}

impl FitReport {
    pub fn ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

fn eval_batch(params: &DenoiserParams, prompt: &PromptSpec, image: &Tensor, draws: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0xe7a1]));
    let items: Vec<(PromptSpec, &Tensor)> = (0..draws).map(|_| (*prompt, image)).collect();
    make_batch(&params.config.schedule, &items, &mut rng)
}

/// `Φ(θ, X)`: fits a fresh adapter to one image by minimizing the
/// schedule's denoising loss over random timesteps and noise, updating only
/// the `A`/`B` factors. Zero steps return the initial adapter, whose `B = 0`.
pub fn fit_single_image(
    params: &DenoiserParams,
    prompt: &PromptSpec,
    image: &ImageBuffer,
    config: &FitConfig,
) -> Result<(LoraParams, FitReport)> {
    config.validate()?;
    let model = params.config;
    if image.height() != model.height || image.width() != model.width {
        return Err(Error::shape(
            "fit_single_image",
            format!(
                "image {}×{} vs model {}×{}",
                image.height(),
                image.width(),
                model.height,
                model.width
            ),
        ));
    }
    let target = image.to_model_space().reshape(&[model.pixels()])?;
    let mut lora = lora_init(&model.layer_dims(), config.rank, seed::derive(config.seed, &[0x10a]))?;
    let probe = eval_batch(params, prompt, &target, config.eval_draws, config.seed)?;
    let initial_loss = eval_batch_loss(params, Some(&lora), &probe)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[0xf17]));
    let factors: Vec<&Tensor> = lora.layers.iter().flat_map(|l| [&l.a, &l.b]).collect();
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.learning_rate), &factors);
    let items: Vec<(PromptSpec, &Tensor)> = (0..config.batch_size).map(|_| (*prompt, &target)).collect();
    let mut g = Graph::<f32>::new();
    let mut log = Vec::new();
    for step in 0..config.steps {
        let batch = make_batch(&model.schedule, &items, &mut rng)?;
        g.reset();
        let mut vars = constant_vars(&mut g, params);
        let mut ids = Vec::with_capacity(2 * lora.layers.len());
        for (layer, l) in vars.layers.iter_mut().zip(&lora.layers) {
            let a = g.param(l.a.clone());
            let b = g.param(l.b.clone());
            ids.extend([a, b]);
            layer.lora = Some((a, b));
        }
        let loss_node = batch_loss(&mut g, &model, &vars, &batch)?;
        let loss = g.value(&loss_node).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("lora fit loss is {loss} at step {step}")));
        }
        let grads = g.backward(loss_node)?;
        let grad_refs: Vec<&Tensor> = ids.iter().map(|&id| grads.get(id).expect("factor gradient")).collect();
        let mut targets: Vec<&mut Tensor> = lora.layers.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]).collect();
        opt.adam_step(&mut targets, &grad_refs)
            .map_err(|e| Error::Numerical(format!("lora fit step {step}: {e}")))?;
        if step % 50 == 0 || step + 1 == config.steps {
            log.push(LossEntry { step, loss });
        }
    }
    let final_loss = eval_batch_loss(params, Some(&lora), &probe)?;
    debug!("fit {}: loss {initial_loss:.5} -> {final_loss:.5}", prompt.text());
    Ok((
        lora.with_meta("rank", config.rank)
            .with_meta("steps", config.steps)
            .with_meta("final_loss", final_loss),
        FitReport {
            initial_loss,
            final_loss,
            log,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialFit {
    pub lora: LoraParams,
    pub stage1: FitReport,
    pub stage2: FitReport,
}

fn stage_error(stage: u8, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("stage {stage}: {m}")),
        Error::Contract(m) => Error::Contract(format!("stage {stage}: {m}")),
        other => other,
    }
}

/// `φ₂ = Φ(θ ⊕ Φ(θ, X), X′)`. `θ` is read-only and `φ₁` is dropped.
pub fn differential_lora(
    params: &DenoiserParams,
    prompt: &PromptSpec,
    before: &ImageBuffer,
    after: &ImageBuffer,
    config: &FitConfig,
) -> Result<DifferentialFit> {
    let c1 = config.with_seed(seed::derive(config.seed, &[1]));
    let c2 = config.with_seed(seed::derive(config.seed, &[2]));
    let (phi1, stage1) = fit_single_image(params, prompt, before, &c1).map_err(|e| stage_error(1, e))?;
    let shifted = lora_apply(params, &phi1)?;
    drop(phi1);
    let (phi2, stage2) = fit_single_image(&shifted, prompt, after, &c2).map_err(|e| stage_error(2, e))?;
    Ok(DifferentialFit {
        lora: phi2,
        stage1,
        stage2,
    })
}

/// The ablation baseline: `Φ(θ, X′)` directly.
pub fn naive_lora(
    params: &DenoiserParams,
    prompt: &PromptSpec,
    after: &ImageBuffer,
    config: &FitConfig,
) -> Result<(LoraParams, FitReport)> {
    fit_single_image(
        params,
        prompt,
        after,
        &config.with_seed(seed::derive(config.seed, &[2])),
    )
}

/// Which adapter a job trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Differential,
    Naive,
}

/// One accepted pair to train on.
#[derive(Clone, Debug)]
pub struct PairJob {
    pub id: Uuid,
    pub prompt: PromptSpec,
    pub before: ImageBuffer,
    pub after: ImageBuffer,
    /// Replaces the shared config for this pair (e.g. a different rank).
    pub config_override: Option<FitConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub pair_id: Uuid,
    #[serde(skip)]
    pub lora: Option<LoraParams>,
    pub stage1_final_loss: Option<f64>,
    pub stage2_final_loss: Option<f64>,
    pub wall_time_secs: f64,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn run_one(params: &DenoiserParams, job: &PairJob, shared: &FitConfig, mode: TrainingMode) -> JobResult {
    let start = Instant::now();
    let base = job.config_override.unwrap_or(*shared);
    // seeded by pair id, so results do not depend on scheduling
    let config = base.with_seed(seed::derive(base.seed, &[seed::hash_str(&job.id.to_string())]));
    let outcome = match mode {
        TrainingMode::Differential => differential_lora(params, &job.prompt, &job.before, &job.after, &config)
            .map(|d| (d.lora, Some(d.stage1.final_loss), d.stage2.final_loss)),
        TrainingMode::Naive => {
            naive_lora(params, &job.prompt, &job.after, &config).map(|(l, r)| (l, None, r.final_loss))
        }
    };
    let wall_time_secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok((lora, s1, s2)) => JobResult {
            pair_id: job.id,
            lora: Some(lora.with_meta("pair_id", job.id.to_string())),
            stage1_final_loss: s1,
            stage2_final_loss: Some(s2),
            wall_time_secs,
            success: true,
            error: None,
        },
        Err(e) => {
            warn!("training job for pair {} failed: {e}", job.id);
            JobResult {
                pair_id: job.id,
                lora: None,
                stage1_final_loss: None,
                stage2_final_loss: None,
                wall_time_secs,
                success: false,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Trains every job independently on up to `parallelism` threads. Results
/// are sorted by pair id and identical for any parallelism. Individual
/// failures are recorded; only a total failure is an error.
pub fn run_jobs(
    params: &DenoiserParams,
    jobs: &[PairJob],
    config: &FitConfig,
    mode: TrainingMode,
    parallelism: usize,
) -> Result<Vec<JobResult>> {
    if jobs.is_empty() {
        return Err(Error::Contract("no pairs to train".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))?;
    let mut results: Vec<JobResult> =
        pool.install(|| jobs.par_iter().map(|j| run_one(params, j, config, mode)).collect());
    results.sort_by_key(|r| r.pair_id);
    if results.iter().all(|r| !r.success) {
        return Err(Error::AllJobsFailed(results.len()));
    }
    Ok(results)
}

/// Averages the successful adapters by block concatenation with scale
/// `α / J`.
pub fn build_update(results: &[JobResult], alpha: f32, iteration: u32) -> Result<LoraParams> {
    let loras: Vec<&LoraParams> = results.iter().filter_map(|r| r.lora.as_ref()).collect();
    if loras.is_empty() {
        return Err(Error::Contract("no successful jobs to build an update from".into()));
    }
    let j = loras.len();
    Ok(lora_concat_scale(&loras, alpha / j as f32)?
        .with_meta("iteration", iteration)
        .with_meta("j", j)
        .with_meta("alpha", alpha as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;
    use crate::world::render_scene;

    fn model() -> DenoiserParams {
        let cfg = DenoiserConfig {
            height: 8,
            width: 8,
            hidden: 32,
            layers: 3,
            ..DenoiserConfig::default()
        };
        DenoiserParams::init(cfg, 2).unwrap()
    }

    fn quick() -> FitConfig {
        FitConfig {
            steps: 60,
            learning_rate: 2e-3,
            batch_size: 4,
            rank: 4,
            eval_draws: 8,
            ..FitConfig::default()
        }
    }

    #[test]
    fn zero_steps_keep_b_zero() {
        let p = model();
        let prompt = PromptSpec::all()[3];
        let img = render_scene(&prompt, 0, 8, 8);
        let (l, r) = fit_single_image(&p, &prompt, &img, &FitConfig { steps: 0, ..quick() }).unwrap();
        assert!(l.layers.iter().all(|x| x.b.data().iter().all(|&v| v == 0.0)));
        assert_eq!(lora_apply(&p, &l).unwrap(), p);
        assert_eq!(r.initial_loss, r.final_loss);
    }

    #[test]
    fn fit_is_deterministic_and_reduces_loss() {
        let p = model();
        let prompt = PromptSpec::all()[8];
        let img = render_scene(&prompt, 1, 8, 8);
        let (a, ra) = fit_single_image(&p, &prompt, &img, &quick()).unwrap();
        let (b, _) = fit_single_image(&p, &prompt, &img, &quick()).unwrap();
        assert_eq!(a, b);
        assert!(ra.final_loss < ra.initial_loss, "{ra:?}");
    }

    #[test]
    fn differential_returns_requested_rank() {
        let p = model();
        let prompt = PromptSpec::all()[1];
        let x = render_scene(&prompt, 1, 8, 8);
        let y = render_scene(&prompt, 2, 8, 8);
        let d = differential_lora(&p, &prompt, &x, &y, &quick()).unwrap();
        assert_eq!(d.lora.rank, 4);
        assert!(d.lora.layers.iter().all(|l| l.a.rows() == 4));
    }

    fn jobs(n: usize) -> Vec<PairJob> {
        (0..n)
            .map(|i| {
                let prompt = PromptSpec::all()[i * 5];
                PairJob {
                    id: crate::curation::pair_id(9, 0, i),
                    prompt,
                    before: render_scene(&prompt, 1, 8, 8),
                    after: render_scene(&prompt, 2, 8, 8),
                    config_override: None,
                }
            })
            .collect()
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let p = model();
        let js = jobs(6);
        let cfg = FitConfig { steps: 10, ..quick() };
        let a = run_jobs(&p, &js, &cfg, TrainingMode::Differential, 1).unwrap();
        let b = run_jobs(&p, &js, &cfg, TrainingMode::Differential, 4).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pair_id, y.pair_id);
            assert_eq!(x.lora, y.lora);
        }
        assert!(a.windows(2).all(|w| w[0].pair_id < w[1].pair_id));
    }

    #[test]
    fn failing_job_is_isolated() {
        let p = model();
        let mut js = jobs(6);
        js[2].config_override = Some(FitConfig {
            learning_rate: f32::NAN,
            steps: 10,
            ..quick()
        });
        let cfg = FitConfig { steps: 10, ..quick() };
        let r = run_jobs(&p, &js, &cfg, TrainingMode::Differential, 3).unwrap();
        assert_eq!(r.iter().filter(|x| x.success).count(), 5);
        let failed = r.iter().find(|x| !x.success).unwrap();
        assert_eq!(failed.pair_id, js[2].id);
        assert!(failed.lora.is_none());
        assert!(run_jobs(&p, &[], &cfg, TrainingMode::Differential, 1).is_err());
        let all_bad: Vec<_> = js
            .iter()
            .cloned()
            .map(|mut j| {
                j.config_override = js[2].config_override;
                j
            })
            .collect();
        assert!(matches!(
            run_jobs(&p, &all_bad, &cfg, TrainingMode::Differential, 2),
            Err(Error::AllJobsFailed(6))
        ));
    }

    #[test]
    fn update_is_mean_of_deltas() {
        let p = model();
        let js = jobs(2);
        let cfg = FitConfig { steps: 5, ..quick() };
        let r = run_jobs(&p, &js, &cfg, TrainingMode::Naive, 2).unwrap();
        let single = build_update(&r[..1], 1.0, 0).unwrap();
        let only = r[0].lora.as_ref().unwrap();
        for (m, o) in single.deltas().unwrap().iter().zip(only.deltas().unwrap()) {
            assert!(m.max_abs_diff(&o).unwrap() <= 1e-6);
        }
        let twice = [r[0].clone(), r[0].clone()];
        let mean = build_update(&twice, 1.0, 0).unwrap();
        for (m, o) in mean.deltas().unwrap().iter().zip(only.deltas().unwrap()) {
            assert!(m.max_abs_diff(&o).unwrap() <= 1e-6);
        }
        assert_eq!(build_update(&r, 0.0, 0).unwrap().update_norm().unwrap(), 0.0);
        assert!(build_update(&[], 1.0, 0).is_err());
        assert_eq!(mean.meta["j"], 2);
    }
}
