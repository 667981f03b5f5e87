//! Pair records, scoring, the automatic filter, the append-only manifest and
//! the review HTTP API.

mod manifest;
mod server;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::interaction::RegionSuggestion;
use crate::world::{aesthetic_proxy, consistency_proxy, image_cosine, ImageBuffer, PromptSpec};

pub use manifest::Manifest;
pub use server::{router, serve, PixelsResponse, ReviewServer, VerdictRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    AutoDropped,
    ReviewPending,
    Accepted,
    Rejected,
    Trained,
}

impl Status {
    pub const ALL: [Status; 6] = [
        Status::Pending,
        Status::AutoDropped,
        Status::ReviewPending,
        Status::Accepted,
        Status::Rejected,
        Status::Trained,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::AutoDropped => "auto_dropped",
            Status::ReviewPending => "review_pending",
            Status::Accepted => "accepted",
            Status::Rejected => "rejected",
            Status::Trained => "trained",
        }
    }

    pub fn parse(s: &str) -> Option<Status> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// pending → auto_dropped | review_pending → accepted | rejected;
    /// accepted → trained.
    pub fn can_become(self, to: Status) -> bool {
        matches!(
            (self, to),
            (Status::Pending, Status::AutoDropped)
                | (Status::Pending, Status::ReviewPending)
                | (Status::ReviewPending, Status::Accepted)
                | (Status::ReviewPending, Status::Rejected)
                | (Status::Accepted, Status::Trained)
        )
    }

    /// Passed the automatic filter.
    pub fn auto_kept(self) -> bool {
        matches!(
            self,
            Status::ReviewPending | Status::Accepted | Status::Rejected | Status::Trained
        )
    }

    pub fn accepted(self) -> bool {
        matches!(self, Status::Accepted | Status::Trained)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    AestheticDown,
    ConsistencyDown,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub reviewer: String,
    #[serde(default)]
    pub note: String,
    /// RFC 3339; absent for automatic acceptance so headless runs stay
    /// byte-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl Verdict {
    pub fn human(decision: Decision, reviewer: impl Into<String>, note: impl Into<String>) -> Self {
        Self {
            decision,
            reviewer: reviewer.into(),
            note: note.into(),
            timestamp: Some(chrono::Utc::now().to_rfc3339()),
        }
    }

    pub fn auto() -> Self {
        Self {
            decision: Decision::Accept,
            reviewer: "auto".into(),
            note: String::new(),
            timestamp: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub aesthetic_before: f64,
    pub aesthetic_after: f64,
    pub consistency_before: f64,
    pub consistency_after: f64,
    pub image_cosine: f64,
}

impl Scores {
    pub fn compute(before: &ImageBuffer, after: &ImageBuffer, prompt: &PromptSpec) -> Self {
        Self {
            aesthetic_before: aesthetic_proxy(before),
            aesthetic_after: aesthetic_proxy(after),
            consistency_before: consistency_proxy(before, prompt),
            consistency_after: consistency_proxy(after, prompt),
            image_cosine: image_cosine(before, after),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: Uuid,
    pub iteration: u32,
    pub prompt: PromptSpec,
    pub refined_prompt: PromptSpec,
    pub seed: u64,
    /// Relative to the run directory.
    pub before_path: String,
    pub after_path: String,
    pub suggestions: Vec<RegionSuggestion>,
    #[serde(default)]
    pub critic: String,
    pub scores: Option<Scores>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<DropReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

/// Deterministic v4-layout id for the `index`-th pair drawn from `seed`.
pub fn pair_id(seed: u64, iteration: u32, index: usize) -> Uuid {
    let hi = crate::seed::derive(seed, &[0x1d, iteration as u64, index as u64]);
    let lo = crate::seed::derive(hi, &[0x1d]);
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&hi.to_le_bytes());
    bytes[8..].copy_from_slice(&lo.to_le_bytes());
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}

impl PairRecord {
    pub fn load_images(&self, run_root: &Path) -> Result<(ImageBuffer, ImageBuffer)> {
        Ok((
            ImageBuffer::load_pgm(&run_root.join(&self.before_path))?,
            ImageBuffer::load_pgm(&run_root.join(&self.after_path))?,
        ))
    }
}

/// Recomputes all five scores from the stored images. Consistency is
/// measured against the refined prompt, which is what generated the pair.
pub fn score_pair(record: &PairRecord, run_root: &Path) -> Result<PairRecord> {
    let (before, after) = record.load_images(run_root)?;
    let mut out = record.clone();
    out.scores = Some(Scores::compute(&before, &after, &record.refined_prompt));
    Ok(out)
}

/// Keep iff aesthetics strictly increased and consistency did not decrease.
pub fn filter_decision(scores: &Scores) -> (Status, Option<DropReason>) {
    let aesthetic_up = scores.aesthetic_after > scores.aesthetic_before;
    let consistency_kept = scores.consistency_after >= scores.consistency_before;
    match (aesthetic_up, consistency_kept) {
        (true, true) => (Status::ReviewPending, None),
        (false, true) => (Status::AutoDropped, Some(DropReason::AestheticDown)),
        (true, false) => (Status::AutoDropped, Some(DropReason::ConsistencyDown)),
        (false, false) => (Status::AutoDropped, Some(DropReason::Both)),
    }
}

pub fn auto_filter(record: &PairRecord) -> Result<(Status, Option<DropReason>)> {
    let scores = record
        .scores
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("pair {} has no scores", record.id)))?;
    Ok(filter_decision(scores))
}

/// Per-iteration aggregates folded from the manifest. Means are over every
/// generated pair, before filtering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub iteration: u32,
    pub generated: usize,
    pub auto_kept: usize,
    pub accepted: usize,
    pub review_pending: usize,
    pub mean_aesthetic_before: f64,
    pub mean_aesthetic_after: f64,
    pub mean_consistency_before: f64,
    pub mean_consistency_after: f64,
    pub mean_image_cosine: f64,
}

impl PairSummary {
    pub fn aesthetic_gain(&self) -> f64 {
        self.mean_aesthetic_after - self.mean_aesthetic_before
    }
}

/// Folds records into one summary per iteration, ascending.
pub fn summarize<'a>(records: impl IntoIterator<Item = &'a PairRecord>) -> Vec<PairSummary> {
    let mut by_iter: std::collections::BTreeMap<u32, (PairSummary, usize)> = Default::default();
    for r in records {
        let (s, scored) = by_iter.entry(r.iteration).or_insert_with(|| {
            (
                PairSummary {
                    iteration: r.iteration,
                    ..Default::default()
                },
                0,
            )
        });
        s.generated += 1;
        s.auto_kept += r.status.auto_kept() as usize;
        s.accepted += r.status.accepted() as usize;
        s.review_pending += (r.status == Status::ReviewPending) as usize;
        if let Some(sc) = &r.scores {
            *scored += 1;
            s.mean_aesthetic_before += sc.aesthetic_before;
            s.mean_aesthetic_after += sc.aesthetic_after;
            s.mean_consistency_before += sc.consistency_before;
            s.mean_consistency_after += sc.consistency_after;
            s.mean_image_cosine += sc.image_cosine;
        }
    }
    by_iter
        .into_values()
        .map(|(mut s, n)| {
            if n > 0 {
                let n = n as f64;
                s.mean_aesthetic_before /= n;
                s.mean_aesthetic_after /= n;
                s.mean_consistency_before /= n;
                s.mean_consistency_after /= n;
                s.mean_image_cosine /= n;
            }
            s
        })
        .collect()
}
