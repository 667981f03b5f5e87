//! The iterative loop over a run directory: generate pairs by interaction,
//! filter and review them, train differential adapters on the accepted
//! pairs, fuse their average into the model, repeat.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json  base.atw  base_report.json  manifest.jsonl  merged.atw  lock
//! iter<k>/pairs/<id>.{before,after}.pgm
//! iter<k>/loras/<id>.atw
//! iter<k>/{jobs.jsonl, update.atw, model.atw, stats.json}
//! ```
//!
//! Iterations are numbered from 1. An iteration is complete once its
//! `stats.json` exists; every earlier step is resumable from the manifest and
//! the per-pair files.

mod config;
mod eval;
mod iteration;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::curation::Manifest;
use crate::diffusion::{procedural_dataset, train_base, DenoiserParams, TrainReport};
use crate::error::{Error, Result};
use crate::lora::{lora_fuse, LoraParams};
use crate::seed;

pub use config::{EvalConfig, RunConfig};
pub use eval::{evaluate, export_merged, held_out_grid, EvalReport};
pub use iteration::{run_iteration, run_loop, should_stop, IterationStats, LoopOutcome, StopReason};

/// Seed-derivation domains. Held-out evaluation uses its own tags, so its
/// noise never coincides with a training draw.
pub(crate) mod tags {
    pub const DATASET: u64 = 0xda7a;
    pub const PROMPT: u64 = 0x9e11;
    pub const GENERATE: u64 = 0x6e4e;
    pub const EVAL_PROMPT: u64 = 0xe7a1;
    pub const EVAL_NOISE: u64 = 0xe7a2;
}

/// Paths inside a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base.atw")
    }

    pub fn base_report(&self) -> PathBuf {
        self.root.join("base_report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn merged(&self) -> PathBuf {
        self.root.join("merged.atw")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join("lock")
    }

    pub fn iter_dir(&self, k: u32) -> PathBuf {
        self.root.join(format!("iter{k}"))
    }

    /// Pair image paths relative to the root, as stored in the manifest.
    pub fn pair_paths(k: u32, id: &uuid::Uuid) -> (String, String) {
        (
            format!("iter{k}/pairs/{id}.before.pgm"),
            format!("iter{k}/pairs/{id}.after.pgm"),
        )
    }

    pub fn lora(&self, k: u32, id: &uuid::Uuid) -> PathBuf {
        self.iter_dir(k).join("loras").join(format!("{id}.atw"))
    }

    pub fn jobs(&self, k: u32) -> PathBuf {
        self.iter_dir(k).join("jobs.jsonl")
    }

    pub fn update(&self, k: u32) -> PathBuf {
        self.iter_dir(k).join("update.atw")
    }

    pub fn model(&self, k: u32) -> PathBuf {
        self.iter_dir(k).join("model.atw")
    }

    pub fn stats(&self, k: u32) -> PathBuf {
        self.iter_dir(k).join("stats.json")
    }

    /// The prompt file, resolved against the run root when relative.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

fn mkdirs(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::FormatLine {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn holder_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

impl RunLock {
    /// Creates the lock file. A lock left by a process that no longer exists
    /// is taken over.
    pub fn acquire(dir: &RunDir) -> Result<Self> {
        let path = dir.lock();
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = std::fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if !holder_alive(pid) => {
                            warn!("removing stale lock of process {pid}");
                            let _ = std::fs::remove_file(&path);
                        }
                        _ => return Err(Error::Locked(dir.root().to_path_buf())),
                    }
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Locked(dir.root().to_path_buf()))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Creates the run directory and writes `config.json`. Returns `false` when
/// the directory already holds the same config; a different config is an
/// error.
pub fn init_run(root: &Path, config: &RunConfig) -> Result<bool> {
    config.validate()?;
    let dir = RunDir::new(root);
    if dir.config().exists() {
        let existing = RunConfig::load(&dir.config())?;
        if existing == *config {
            return Ok(false);
        }
        return Err(Error::Contract(format!(
            "{} already holds a different config",
            root.display()
        )));
    }
    mkdirs(root)?;
    config.save(&dir.config())?;
    Ok(true)
}

/// Trains the base model on the procedural corpus and writes `base.atw`.
/// Returns `None` without training when the file already exists.
pub fn train_base_model(root: &Path) -> Result<Option<TrainReport>> {
    let dir = RunDir::new(root);
    let config = RunConfig::load(&dir.config())?;
    let _lock = RunLock::acquire(&dir)?;
    if dir.base().exists() {
        DenoiserParams::load(&dir.base())?;
        return Ok(None);
    }
    let m = config.model;
    let data = procedural_dataset(
        config.dataset_per_prompt,
        m.height,
        m.width,
        seed::derive(config.seed, &[tags::DATASET]),
    );
    info!("training base model on {} images", data.len());
    let (params, report) = train_base(&data, m, &config.base_training)?;
    write_json(&dir.base_report(), &report)?;
    params.save(&dir.base())?;
    Ok(Some(report))
}

/// A run directory opened for writing: the lock, the config, the base and
/// current models and every completed iteration's update and stats.
pub struct RunState {
    pub dir: RunDir,
    pub config: RunConfig,
    pub base: DenoiserParams,
    /// `θ` after the last completed iteration.
    pub current: DenoiserParams,
    /// `(k, φ^[k])` for every completed iteration that produced an update.
    pub updates: Vec<(u32, LoraParams)>,
    pub history: Vec<IterationStats>,
    /// Shared with any in-process review server, so writes stay serialized.
    pub manifest: Manifest,
    _lock: RunLock,
}

/// Tolerance for recomputed-vs-stored weights.
pub const INTEGRITY_TOL: f32 = 1e-5;

impl RunState {
    /// Locks the directory and replays completed iterations, checking that
    /// `base ⊕ φ^[1] ⊕ … ⊕ φ^[k]` matches each stored `model.atw`.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = RunDir::new(root);
        let config = RunConfig::load(&dir.config())?;
        let lock = RunLock::acquire(&dir)?;
        if !dir.base().exists() {
            return Err(Error::Contract(format!(
                "{} has no base model; run train-base first",
                root.display()
            )));
        }
        let base = DenoiserParams::load(&dir.base())?;
        if base.config != config.model {
            return Err(Error::Integrity(
                "base.atw was trained with a different model config".into(),
            ));
        }
        let mut current = base.clone();
        let mut updates = Vec::new();
        let mut history = Vec::new();
        for k in 1.. {
            if !dir.stats(k).exists() {
                break;
            }
            let stats: IterationStats = read_json(&dir.stats(k))?;
            if dir.update(k).exists() {
                let update = LoraParams::load(&dir.update(k))?;
                current = lora_fuse(&current, &update, 1.0)?;
                updates.push((k, update));
            }
            let stored = DenoiserParams::load(&dir.model(k))?;
            let diff = stored.max_abs_diff(&current)?;
            if diff > INTEGRITY_TOL {
                return Err(Error::Integrity(format!(
                    "iteration {k}: stored model differs from base ⊕ updates by {diff:e}"
                )));
            }
            current = stored;
            history.push(stats);
        }
        Ok(Self {
            manifest: Manifest::new(dir.manifest()),
            dir,
            config,
            base,
            current,
            updates,
            history,
            _lock: lock,
        })
    }

    pub fn completed(&self) -> u32 {
        self.history.len() as u32
    }
}
