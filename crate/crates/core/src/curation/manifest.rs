//! Append-only JSONL log of pair snapshots; the newest line per id wins.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use uuid::Uuid;

use super::{PairRecord, Status, Verdict};
use crate::error::{Error, Result};

/// Handle on a manifest file. Clones share one write lock, so every
/// read-validate-append sequence is serialized within the process.
#[derive(Clone, Debug)]
pub struct Manifest {
    path: PathBuf,
    writer: Arc<Mutex<()>>,
}

/// Drops a partial final line left by a crash mid-append, so the next
/// append starts on a fresh line.
fn repair_tail(f: &mut std::fs::File) -> std::io::Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    if f.metadata()?.len() == 0 {
        return Ok(());
    }
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    if last[0] == b'\n' {
        return Ok(());
    }
    let mut content = Vec::new();
    f.seek(SeekFrom::Start(0))?;
    f.read_to_end(&mut content)?;
    let keep = content.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    f.set_len(keep as u64)
}

impl Manifest {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            writer: Arc::new(Mutex::new(())),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append_locked(&self, record: &PairRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        repair_tail(&mut f).map_err(|e| Error::io(&self.path, e))?;
        // one write call per line keeps appends whole under O_APPEND
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&self, record: &PairRecord) -> Result<()> {
        let _g = self.writer.lock().expect("manifest writer poisoned");
        self.append_locked(record)
    }

    pub fn append_all<'a>(&self, records: impl IntoIterator<Item = &'a PairRecord>) -> Result<()> {
        let _g = self.writer.lock().expect("manifest writer poisoned");
        records.into_iter().try_for_each(|r| self.append_locked(r))
    }

    /// Every snapshot in file order. A missing file is an empty log. A torn
    /// final line without a newline is ignored; any other bad line is an
    /// error naming it.
    pub fn read_all(&self) -> Result<Vec<PairRecord>> {
        let content = match std::fs::read_to_string(&self.path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        let complete = content.ends_with('\n');
        let lines: Vec<&str> = content.lines().collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(r) => out.push(r),
                Err(_) if i + 1 == lines.len() && !complete => break,
                Err(e) => {
                    return Err(Error::FormatLine {
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Newest snapshot per id, in order of first appearance.
    pub fn latest_view(&self) -> Result<IndexMap<Uuid, PairRecord>> {
        let mut view = IndexMap::new();
        for r in self.read_all()? {
            view.insert(r.id, r);
        }
        Ok(view)
    }

    pub fn get(&self, id: Uuid) -> Result<Option<PairRecord>> {
        Ok(self.latest_view()?.swap_remove(&id))
    }

    /// Validates the transition against the newest snapshot and appends the
    /// updated record. Unknown ids are a contract error.
    pub fn update_status(&self, id: Uuid, to: Status, verdict: Option<Verdict>) -> Result<PairRecord> {
        self.update(id, to, |rec| {
            if verdict.is_some() {
                rec.verdict = verdict;
            }
        })
    }

    /// Like [`Manifest::update_status`], with `edit` applied to the record
    /// before it is appended.
    pub fn update(&self, id: Uuid, to: Status, edit: impl FnOnce(&mut PairRecord)) -> Result<PairRecord> {
        let _g = self.writer.lock().expect("manifest writer poisoned");
        let mut rec = self
            .latest_view()?
            .swap_remove(&id)
            .ok_or_else(|| Error::Contract(format!("unknown pair {id}")))?;
        if !rec.status.can_become(to) {
            return Err(Error::Transition {
                id: id.to_string(),
                from: rec.status.to_string(),
                to: to.to_string(),
            });
        }
        rec.status = to;
        edit(&mut rec);
        self.append_locked(&rec)?;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{pair_id, Decision};
    use crate::world::PromptSpec;

    fn record(i: usize) -> PairRecord {
        let p = PromptSpec::all()[i % 36];
        PairRecord {
            id: pair_id(0, 0, i),
            iteration: 0,
            prompt: p,
            refined_prompt: p,
            seed: i as u64,
            before_path: format!("iter0/pairs/{i}.before.pgm"),
            after_path: format!("iter0/pairs/{i}.after.pgm"),
            suggestions: vec![],
            critic: "rule_based".into(),
            scores: None,
            status: Status::Pending,
            drop_reason: None,
            verdict: None,
        }
    }

    #[test]
    fn append_and_fold() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path().join("manifest.jsonl"));
        assert!(m.latest_view().unwrap().is_empty());
        let r = record(1);
        m.append(&r).unwrap();
        assert_eq!(m.get(r.id).unwrap().unwrap(), r);
        let mut r2 = r.clone();
        r2.status = Status::ReviewPending;
        m.append(&r2).unwrap();
        m.append(&record(2)).unwrap();
        let view = m.latest_view().unwrap();
        assert_eq!(view.len(), 2);
        assert_eq!(view[&r.id].status, Status::ReviewPending);
        assert_eq!(view.get_index(0).unwrap().0, &r.id);
    }

    #[test]
    fn illegal_transition_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path().join("manifest.jsonl"));
        let r = record(3);
        m.append(&r).unwrap();
        m.update_status(r.id, Status::ReviewPending, None).unwrap();
        let v = Verdict::human(Decision::Reject, "me", "blurry");
        let rec = m.update_status(r.id, Status::Rejected, Some(v)).unwrap();
        assert_eq!(rec.verdict.unwrap().note, "blurry");
        assert!(matches!(
            m.update_status(r.id, Status::Trained, None),
            Err(Error::Transition { .. })
        ));
        assert!(matches!(
            m.update_status(r.id, Status::Accepted, None),
            Err(Error::Transition { .. })
        ));
    }

    #[test]
    fn corrupt_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = Manifest::new(&path);
        m.append(&record(1)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{not json}\n").unwrap();
        m.append(&record(2)).unwrap();
        assert!(matches!(m.read_all(), Err(Error::FormatLine { line: 2, .. })));
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = Manifest::new(&path);
        m.append(&record(1)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"id\":").unwrap();
        assert_eq!(m.read_all().unwrap().len(), 1);
        m.append(&record(2)).unwrap();
        assert_eq!(m.read_all().unwrap().len(), 2);
    }
}
