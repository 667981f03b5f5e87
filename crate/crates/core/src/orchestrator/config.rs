use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::interaction::CriticBackend;
use crate::training::{FitConfig, TrainingMode};

/// Held-out evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prompts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { prompts: 100, seed: 0 }
    }
}

/// Every knob of a run, stored as `config.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub base_training: TrainConfig,
    /// Jittered renders per prompt in the base training corpus.
    pub dataset_per_prompt: usize,
    pub sampler_steps: usize,
    pub prompts_per_iteration: usize,
    /// JSONL prompt source; prompts are drawn from the procedural sampler
    /// when absent.
    pub prompt_file: Option<PathBuf>,
    pub critic: CriticBackend,
    pub fit: FitConfig,
    pub training_mode: TrainingMode,
    /// Fusion weight of each iteration's averaged update.
    pub alpha: f32,
    pub min_pairs: usize,
    pub epsilon_stop: f64,
    pub max_iters: u32,
    /// Accept every pair that passes the automatic filter without review.
    pub auto_accept: bool,
    /// How long a human-review iteration waits for the queue to drain.
    /// `None` waits indefinitely.
    pub review_timeout_secs: Option<u64>,
    pub parallelism: usize,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            base_training: TrainConfig::default(),
            dataset_per_prompt: 24,
            sampler_steps: 50,
            prompts_per_iteration: 200,
            prompt_file: None,
            critic: CriticBackend::default(),
            fit: FitConfig::default(),
            training_mode: TrainingMode::Differential,
            alpha: 0.25,
            min_pairs: 8,
            epsilon_stop: 0.01,
            max_iters: 8,
            auto_accept: false,
            review_timeout_secs: None,
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fit.validate()?;
        let bad = |m: String| Err(Error::Contract(m));
        if self.sampler_steps == 0 {
            return bad("sampler_steps must be ≥ 1".into());
        }
        if self.prompts_per_iteration == 0 {
            return bad("prompts_per_iteration must be ≥ 1".into());
        }
        if self.dataset_per_prompt == 0 {
            return bad("dataset_per_prompt must be ≥ 1".into());
        }
        if !self.alpha.is_finite() {
            return bad(format!("alpha {} is not finite", self.alpha));
        }
        if self.critic.max_regions() == 0 {
            return bad("critic max_regions must be ≥ 1".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be ≥ 1".into());
        }
        if self.eval.prompts == 0 {
            return bad("eval.prompts must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::FormatLine {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = RunConfig {
            alpha: 0.5,
            ..RunConfig::default()
        };
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);

        std::fs::write(&path, r#"{"alpha": 1.0, "learning_rat": 3}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        std::fs::write(&path, r#"{"fit": {"steps": 5, "bogus": 1}}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        std::fs::write(&path, r#"{"sampler_steps": 0}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Contract(_))));
        std::fs::write(&path, r#"{"critic": {"kind": "rule_based", "max_regions": 2}}"#).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap().critic.max_regions(), 2);
    }
}
