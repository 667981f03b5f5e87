use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{tags, EvalConfig, RunState, INTEGRITY_TOL};
use crate::diffusion::{sample, DenoiserParams, SamplerConfig};
use crate::error::{Error, Result};
use crate::lora::{lora_concat_scale, lora_fuse, LoraParams};
use crate::seed;
use crate::world::{aesthetic_proxy, consistency_proxy, sample_prompt, PromptSpec};

/// Held-out `(prompt, noise seed)` pairs. The seed domains differ from the
/// ones iterations draw from, so no evaluation sample repeats a training
/// draw.
pub fn held_out_grid(config: &EvalConfig) -> Vec<(PromptSpec, u64)> {
    (0..config.prompts as u64)
        .map(|i| {
            (
                sample_prompt(seed::derive(config.seed, &[tags::EVAL_PROMPT, i])),
                seed::derive(config.seed, &[tags::EVAL_NOISE, i]),
            )
        })
        .collect()
}

/// Model `b` against model `a` on the same grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompts: usize,
    pub seed: u64,
    pub sampler_steps: usize,
    pub mean_aesthetic_a: f64,
    pub mean_aesthetic_b: f64,
    pub mean_consistency_a: f64,
    pub mean_consistency_b: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    /// `(wins + ties / 2) / prompts` for `b`, by aesthetic proxy.
    pub win_rate: f64,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10} {:>12}", "model", "aesthetic", "consistency");
        let _ = writeln!(
            s,
            "{:<8} {:>10.4} {:>12.4}",
            "a", self.mean_aesthetic_a, self.mean_consistency_a
        );
        let _ = writeln!(
            s,
            "{:<8} {:>10.4} {:>12.4}",
            "b", self.mean_aesthetic_b, self.mean_consistency_b
        );
        let _ = writeln!(
            s,
            "win rate of b: {:.4} ({} wins, {} ties, {} losses over {} prompts)",
            self.win_rate, self.wins, self.ties, self.losses, self.prompts
        );
        s
    }
}

pub fn evaluate(
    a: &DenoiserParams,
    b: &DenoiserParams,
    config: &EvalConfig,
    sampler_steps: usize,
    parallelism: usize,
) -> Result<EvalReport> {
    let grid = held_out_grid(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))?;
    let rows: Vec<[f64; 4]> = pool.install(|| {
        grid.par_iter()
            .map(|(p, s)| {
                let sampler = SamplerConfig::new(sampler_steps, *s);
                let xa = sample(a, None, p, &sampler)?;
                let xb = sample(b, None, p, &sampler)?;
                Ok([
                    aesthetic_proxy(&xa),
                    aesthetic_proxy(&xb),
                    consistency_proxy(&xa, p),
                    consistency_proxy(&xb, p),
                ])
            })
            .collect::<Result<_>>()
    })?;
    let n = rows.len();
    let mean = |c: usize| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
    let wins = rows.iter().filter(|r| r[1] > r[0]).count();
    let ties = rows.iter().filter(|r| r[1] == r[0]).count();
    Ok(EvalReport {
        prompts: n,
        seed: config.seed,
        sampler_steps,
        mean_aesthetic_a: mean(0),
        mean_aesthetic_b: mean(1),
        mean_consistency_a: mean(2),
        mean_consistency_b: mean(3),
        wins,
        ties,
        losses: n - wins - ties,
        win_rate: (wins as f64 + 0.5 * ties as f64) / n as f64,
    })
}

/// Concatenates every iteration's update at scale 1 into one adapter,
/// checks that fusing it into the base reproduces the current model, and
/// writes `merged.atw`.
pub fn export_merged(state: &RunState) -> Result<LoraParams> {
    if state.updates.is_empty() {
        return Err(Error::Contract("no completed iteration has an update to export".into()));
    }
    let loras: Vec<&LoraParams> = state.updates.iter().map(|(_, l)| l).collect();
    let iterations: Vec<u32> = state.updates.iter().map(|(k, _)| *k).collect();
    let merged = lora_concat_scale(&loras, 1.0)?.with_meta("iterations", iterations);
    let fused = lora_fuse(&state.base, &merged, 1.0)?;
    let diff = fused.max_abs_diff(&state.current)?;
    if diff > INTEGRITY_TOL {
        return Err(Error::Integrity(format!(
            "base ⊕ merged differs from the current model by {diff:e}"
        )));
    }
    merged.save(&state.dir.merged())?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;

    #[test]
    fn identical_models_tie() {
        let cfg = DenoiserConfig {
            height: 8,
            width: 8,
            hidden: 16,
            ..DenoiserConfig::default()
        };
        let m = DenoiserParams::init(cfg, 1).unwrap();
        let r = evaluate(&m, &m, &EvalConfig { prompts: 6, seed: 3 }, 4, 2).unwrap();
        assert_eq!(r.win_rate, 0.5);
        assert_eq!(r.ties, 6);
        assert!(r.table().contains("win rate of b: 0.5000"));
    }

    #[test]
    fn grid_is_deterministic_and_seed_dependent() {
        let c = EvalConfig { prompts: 10, seed: 0 };
        assert_eq!(held_out_grid(&c), held_out_grid(&c));
        assert_ne!(held_out_grid(&c), held_out_grid(&EvalConfig { seed: 1, ..c }));
    }
}
