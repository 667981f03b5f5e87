use std::collections::HashMap;
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{mkdirs, tags, write_json, RunConfig, RunState};
use crate::curation::{auto_filter, pair_id, summarize, PairRecord, PairSummary, Scores, Status, Verdict};
use crate::diffusion::DenoiserParams;
use crate::error::{Error, Result};
use crate::interaction::interactive_generate;
use crate::lora::{lora_fuse, LoraParams};
use crate::seed;
use crate::training::{build_update, run_jobs, JobResult, PairJob};
use crate::world::{load_prompt_file, refine_prompt, sample_prompt, PromptSpec};

const REVIEW_POLL: Duration = Duration::from_millis(500);

/// One row of the per-iteration statistics. The pair counts and means are a
/// pure fold of the manifest; means cover every generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    #[serde(flatten)]
    pub pairs: PairSummary,
    pub prompts_sampled: usize,
    pub alpha: f32,
    /// Adapters averaged into this iteration's update.
    pub j: usize,
    pub failed_jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    InsufficientPairs,
    Diminished,
    MaxIters,
}

/// Stops when the last iteration accepted fewer than `min_pairs`, when the
/// mean interaction gain stayed below `epsilon_stop` for the last two
/// iterations, or when `max_iters` iterations are done.
pub fn should_stop(history: &[IterationStats], config: &RunConfig) -> Option<StopReason> {
    let last = history.last()?;
    if last.pairs.accepted < config.min_pairs {
        return Some(StopReason::InsufficientPairs);
    }
    if let [.., a, b] = history {
        if a.pairs.aesthetic_gain() < config.epsilon_stop && b.pairs.aesthetic_gain() < config.epsilon_stop {
            return Some(StopReason::Diminished);
        }
    }
    if history.len() >= config.max_iters as usize {
        return Some(StopReason::MaxIters);
    }
    None
}

/// The `(index, prompt, generation seed)` grid of iteration `k`. A prompt
/// file is walked in order across iterations.
fn prompt_grid(state: &RunState, k: u32) -> Result<Vec<(usize, PromptSpec, u64)>> {
    let cfg = &state.config;
    let n = cfg.prompts_per_iteration;
    let from_file = match &cfg.prompt_file {
        Some(p) => {
            let list = load_prompt_file(&state.dir.resolve(p))?;
            if list.is_empty() {
                return Err(Error::Contract(format!("prompt file {} is empty", p.display())));
            }
            Some(list)
        }
        None => None,
    };
    Ok((0..n)
        .map(|i| {
            let prompt = match &from_file {
                Some(list) => list[((k as usize - 1) * n + i) % list.len()],
                None => sample_prompt(seed::derive(cfg.seed, &[tags::PROMPT, k as u64, i as u64])),
            };
            (i, prompt, seed::derive(cfg.seed, &[tags::GENERATE, k as u64, i as u64]))
        })
        .collect())
}

fn generate_pair(state: &RunState, k: u32, index: usize, prompt: PromptSpec, gen_seed: u64) -> Result<PairRecord> {
    let cfg = &state.config;
    let refined = refine_prompt(&prompt, &cfg.critic).unwrap_or_else(|e| {
        warn!("prompt refinement failed ({e}); using the prompt as given");
        prompt
    });
    let r = interactive_generate(&state.current, None, &refined, gen_seed, &cfg.critic, cfg.sampler_steps)?;
    // scores are taken on the stored 8-bit images so they can be recomputed
    let (before, after) = (r.before.quantized(), r.after.quantized());
    let id = pair_id(cfg.seed, k, index);
    let (before_path, after_path) = super::RunDir::pair_paths(k, &id);
    before.save_pgm(&state.dir.root().join(&before_path))?;
    after.save_pgm(&state.dir.root().join(&after_path))?;
    Ok(PairRecord {
        id,
        iteration: k,
        prompt,
        refined_prompt: refined,
        seed: gen_seed,
        before_path,
        after_path,
        scores: Some(Scores::compute(&before, &after, &refined)),
        suggestions: r.suggestions,
        critic: r.critic_used,
        status: Status::Pending,
        drop_reason: None,
        verdict: None,
    })
}

fn records_of(state: &RunState, k: u32) -> Result<Vec<PairRecord>> {
    Ok(state
        .manifest
        .latest_view()?
        .into_values()
        .filter(|r| r.iteration == k)
        .collect())
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))
}

/// Blocks until no pair of iteration `k` awaits review, or the configured
/// timeout passes.
fn wait_for_review(state: &RunState, k: u32) -> Result<()> {
    let start = Instant::now();
    let timeout = state.config.review_timeout_secs.map(Duration::from_secs);
    let mut announced = false;
    loop {
        let pending = records_of(state, k)?
            .iter()
            .filter(|r| r.status == Status::ReviewPending)
            .count();
        if pending == 0 {
            return Ok(());
        }
        if timeout.is_some_and(|t| start.elapsed() >= t) {
            warn!("review timed out with {pending} pairs still pending; training on the accepted ones");
            return Ok(());
        }
        if !announced {
            info!("waiting for review of {pending} pairs in iteration {k}");
            announced = true;
        }
        std::thread::sleep(REVIEW_POLL);
    }
}

/// Trains the accepted pairs, reusing adapters already on disk.
fn train_accepted(state: &RunState, k: u32, accepted: &[PairRecord]) -> Result<Vec<JobResult>> {
    let dir = &state.dir;
    mkdirs(&dir.iter_dir(k).join("loras"))?;
    let previous: HashMap<Uuid, JobResult> = std::fs::read_to_string(dir.jobs(k))
        .map(|text| {
            text.lines()
                .filter_map(|l| serde_json::from_str::<JobResult>(l).ok())
                .map(|r| (r.pair_id, r))
                .collect()
        })
        .unwrap_or_default();
    let mut results = Vec::new();
    let mut jobs = Vec::new();
    for rec in accepted {
        let path = dir.lora(k, &rec.id);
        if path.exists() {
            let lora = LoraParams::load(&path)?;
            let mut r = previous.get(&rec.id).cloned().unwrap_or(JobResult {
                pair_id: rec.id,
                lora: None,
                stage1_final_loss: None,
                stage2_final_loss: None,
                wall_time_secs: 0.0,
                success: true,
                error: None,
            });
            r.lora = Some(lora);
            results.push(r);
        } else {
            let (before, after) = rec.load_images(dir.root())?;
            jobs.push(PairJob {
                id: rec.id,
                prompt: rec.refined_prompt,
                before,
                after,
                config_override: None,
            });
        }
    }
    if !jobs.is_empty() {
        info!("training {} adapters ({} reused)", jobs.len(), results.len());
        let cfg = &state.config;
        for r in run_jobs(&state.current, &jobs, &cfg.fit, cfg.training_mode, cfg.parallelism)? {
            if let Some(lora) = &r.lora {
                lora.save(&dir.lora(k, &r.pair_id))?;
            }
            results.push(r);
        }
    }
    results.sort_by_key(|r| r.pair_id);
    let mut log = String::new();
    for r in &results {
        log += &serde_json::to_string(r)?;
        log.push('\n');
    }
    std::fs::write(dir.jobs(k), log).map_err(|e| crate::error::Error::io(dir.jobs(k), e))?;
    Ok(results)
}

fn finish(
    state: &mut RunState,
    k: u32,
    model: DenoiserParams,
    update: Option<LoraParams>,
    j: usize,
    failed: usize,
) -> Result<IterationStats> {
    let dir = &state.dir;
    if let Some(u) = &update {
        u.save(&dir.update(k))?;
    }
    model.save(&dir.model(k))?;
    let records = records_of(state, k)?;
    for r in records.iter().filter(|r| r.status == Status::Accepted) {
        // a failed job leaves its pair accepted but untrained
        if update.is_some() && dir.lora(k, &r.id).exists() {
            state.manifest.update_status(r.id, Status::Trained, None)?;
        }
    }
    let records = records_of(state, k)?;
    let pairs = summarize(&records).into_iter().next().unwrap_or(PairSummary {
        iteration: k,
        ..Default::default()
    });
    let stats = IterationStats {
        pairs,
        prompts_sampled: state.config.prompts_per_iteration,
        alpha: state.config.alpha,
        j,
        failed_jobs: failed,
    };
    write_json(&dir.stats(k), &stats)?;
    state.current = model;
    if let Some(u) = update {
        state.updates.push((k, u));
    }
    state.history.push(stats.clone());
    Ok(stats)
}

/// Runs iteration `completed + 1` to completion, resuming whatever an
/// interrupted attempt left on disk. With no accepted pairs the iteration is
/// recorded with an unchanged model and `IterationStarved` is returned.
pub fn run_iteration(state: &mut RunState) -> Result<IterationStats> {
    let k = state.completed() + 1;
    let cfg = state.config.clone();
    mkdirs(&state.dir.iter_dir(k).join("pairs"))?;
    let manifest = state.manifest.clone();

    // generate
    let grid = prompt_grid(state, k)?;
    let known = manifest.latest_view()?;
    let missing: Vec<_> = grid
        .into_iter()
        .filter(|(i, _, _)| !known.contains_key(&pair_id(cfg.seed, k, *i)))
        .collect();
    if !missing.is_empty() {
        info!("iteration {k}: generating {} pairs", missing.len());
        let st: &RunState = state;
        let fresh: Vec<PairRecord> = pool(cfg.parallelism)?.install(|| {
            missing
                .par_iter()
                .map(|&(i, p, s)| generate_pair(st, k, i, p, s))
                .collect::<Result<_>>()
        })?;
        manifest.append_all(&fresh)?;
    }

    // filter
    for r in records_of(state, k)?.iter().filter(|r| r.status == Status::Pending) {
        let (to, reason) = auto_filter(r)?;
        manifest.update(r.id, to, |rec| rec.drop_reason = reason)?;
    }

    // review
    if cfg.auto_accept {
        for r in records_of(state, k)?
            .iter()
            .filter(|r| r.status == Status::ReviewPending)
        {
            manifest.update_status(r.id, Status::Accepted, Some(Verdict::auto()))?;
        }
    } else {
        wait_for_review(state, k)?;
    }

    // train and fuse
    let accepted: Vec<PairRecord> = records_of(state, k)?
        .into_iter()
        .filter(|r| r.status.accepted())
        .collect();
    if accepted.is_empty() {
        let model = state.current.clone();
        finish(state, k, model, None, 0, 0)?;
        return Err(Error::IterationStarved {
            iteration: k,
            accepted: 0,
        });
    }
    let results = train_accepted(state, k, &accepted)?;
    let failed = results.iter().filter(|r| !r.success).count();
    let update = build_update(&results, cfg.alpha, k)?;
    let model = lora_fuse(&state.current, &update, 1.0)?;
    let j = results.len() - failed;
    let stats = finish(state, k, model, Some(update), j, failed)?;
    info!(
        "iteration {k}: {} generated, {} kept, {} accepted, aesthetic {:.4} -> {:.4}",
        stats.pairs.generated,
        stats.pairs.auto_kept,
        stats.pairs.accepted,
        stats.pairs.mean_aesthetic_before,
        stats.pairs.mean_aesthetic_after
    );
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    /// Iterations run by this call.
    pub ran: Vec<IterationStats>,
    pub reason: StopReason,
}

/// Runs iterations until [`should_stop`] fires. A starved iteration is
/// recorded and then stops the loop through the pair-count rule.
pub fn run_loop(state: &mut RunState) -> Result<LoopOutcome> {
    let mut ran = Vec::new();
    loop {
        if let Some(reason) = should_stop(&state.history, &state.config) {
            return Ok(LoopOutcome { ran, reason });
        }
        match run_iteration(state) {
            Ok(s) => ran.push(s),
            Err(Error::IterationStarved { iteration, .. }) => {
                warn!("iteration {iteration} produced no accepted pairs");
                ran.push(state.history.last().cloned().expect("starved iteration is recorded"));
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(accepted: usize, before: f64, after: f64) -> IterationStats {
        IterationStats {
            pairs: PairSummary {
                iteration: 1,
                generated: 200,
                auto_kept: accepted,
                accepted,
                mean_aesthetic_before: before,
                mean_aesthetic_after: after,
                ..Default::default()
            },
            prompts_sampled: 200,
            alpha: 1.0,
            j: accepted,
            failed_jobs: 0,
        }
    }

    #[test]
    fn stop_rules() {
        let cfg = RunConfig::default();
        assert_eq!(should_stop(&[], &cfg), None);
        assert_eq!(should_stop(&[row(40, 0.4, 0.5)], &cfg), None);
        assert_eq!(
            should_stop(&[row(3, 0.4, 0.5)], &cfg),
            Some(StopReason::InsufficientPairs)
        );
        let gains = [row(40, 0.0, 0.05), row(40, 0.0, 0.004), row(40, 0.0, 0.003)];
        assert_eq!(should_stop(&gains, &cfg), Some(StopReason::Diminished));
        assert_eq!(should_stop(&gains[..2], &cfg), None);
        let eight: Vec<_> = (0..8).map(|_| row(40, 0.4, 0.5)).collect();
        assert_eq!(should_stop(&eight, &cfg), Some(StopReason::MaxIters));
        assert_eq!(should_stop(&eight[..7], &cfg), None);
    }
}
