//! Human audit of fused summaries against their image sets.

mod server;

pub use server::{router, serve, AuditState};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusedSummary, Variant};
use crate::io::{read_jsonl_or_empty, sha256_hex, JsonlAppender};
use crate::kgdata::{Dataset, Qid};

/// Instruction shown with every case.
pub const RUBRIC: &str = "Judge whether the summary reflects what the images actually show: the main objects, scenes and visual traits. \
A summary may pass without naming the entity. Choose Match when it does, Mismatch when it describes content the images do not \
support, and Uncertain when the images do not allow a decision. Hide images that are unrelated to the entity. Give a short \
reason for Mismatch and Uncertain.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    #[default]
    Pending,
    Done,
}

/// One entity's summary next to its images. Images are media keys
/// (`{source}/{filename}`), original images first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditCase {
    pub case_id: String,
    pub qid: Qid,
    pub entity_name: String,
    pub summary_text: String,
    pub image_filenames: Vec<String>,
    #[serde(default)]
    pub status: CaseStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditBatch {
    pub seed: u64,
    pub cases: Vec<AuditCase>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VerdictKind {
    Match,
    Mismatch,
    Uncertain,
}

impl VerdictKind {
    pub const ALL: [VerdictKind; 3] = [VerdictKind::Match, VerdictKind::Mismatch, VerdictKind::Uncertain];
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Request body of a verdict submission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictSubmission {
    pub verdict: VerdictKind,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub hidden_images: Vec<String>,
    #[serde(default)]
    pub annotator: String,
}

/// One line of the verdict log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub case_id: String,
    pub verdict: VerdictKind,
    pub rationale: String,
    pub hidden_images: Vec<String>,
    pub annotator: String,
    pub timestamp: String,
}

impl Verdict {
    fn time(&self) -> Option<DateTime<Utc>> {
        DateTime::parse_from_rfc3339(&self.timestamp).ok().map(|t| t.with_timezone(&Utc))
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("only {eligible} eligible entities, {requested} requested")]
    NotEnoughEligible { eligible: usize, requested: usize },
    #[error("unknown case {0}")]
    UnknownCase(String),
    #[error("invalid verdict: {0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

pub fn case_id(qid: &Qid, seed: u64) -> String {
    sha256_hex(format!("{qid}:{seed}").as_bytes())[..16].to_owned()
}

/// Entities with a nonempty Fusion summary and at least one image, sorted by qid.
pub fn eligible_cases(dataset: &Dataset, summaries: &[FusedSummary], seed: u64) -> Vec<AuditCase> {
    let fused: HashMap<&Qid, &str> = summaries
        .iter()
        .filter(|s| s.variant == Variant::Fusion && !s.text.trim().is_empty())
        .map(|s| (&s.qid, s.text.as_str()))
        .collect();
    let mut images: HashMap<&Qid, Vec<_>> = HashMap::new();
    for r in &dataset.images {
        images.entry(&r.qid).or_default().push(r);
    }
    let mut cases: Vec<AuditCase> = dataset
        .entities
        .iter()
        .filter_map(|e| {
            let text = fused.get(&e.qid)?;
            let mut imgs = images.get(&e.qid)?.clone();
            imgs.sort_by_key(|r| (r.source, r.index));
            Some(AuditCase {
                case_id: case_id(&e.qid, seed),
                qid: e.qid.clone(),
                entity_name: e.name.clone(),
                summary_text: (*text).to_owned(),
                image_filenames: imgs.iter().map(|r| r.media_key()).collect(),
                status: CaseStatus::Pending,
            })
        })
        .collect();
    cases.sort_by(|a, b| a.qid.as_str().cmp(b.qid.as_str()));
    cases
}

/// `n` distinct eligible cases in seeded random order.
pub fn sample_cases(
    dataset: &Dataset,
    summaries: &[FusedSummary],
    n: usize,
    seed: u64,
) -> Result<AuditBatch, AuditError> {
    let mut cases = eligible_cases(dataset, summaries, seed);
    if cases.len() < n {
        return Err(AuditError::NotEnoughEligible { eligible: cases.len(), requested: n });
    }
    cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    cases.truncate(n);
    Ok(AuditBatch { seed, cases })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total: usize,
    pub done: usize,
    pub pending: usize,
    pub counts: BTreeMap<VerdictKind, usize>,
    pub mismatch_case_ids: Vec<String>,
}

/// Latest verdict per case: later timestamp wins, later log line on equal time.
pub fn replay(log: &[Verdict]) -> HashMap<String, Verdict> {
    let mut latest: HashMap<String, Verdict> = HashMap::new();
    for v in log {
        let newer = latest.get(&v.case_id).is_none_or(|prev| v.time() >= prev.time());
        if newer {
            latest.insert(v.case_id.clone(), v.clone());
        }
    }
    latest
}

pub fn audit_report(batch: &AuditBatch, latest: &HashMap<String, Verdict>) -> AuditReport {
    let mut report = AuditReport {
        total: batch.cases.len(),
        counts: VerdictKind::ALL.iter().map(|k| (*k, 0)).collect(),
        ..AuditReport::default()
    };
    for case in &batch.cases {
        match latest.get(&case.case_id) {
            Some(v) => {
                report.done += 1;
                *report.counts.entry(v.verdict).or_default() += 1;
                if v.verdict == VerdictKind::Mismatch {
                    report.mismatch_case_ids.push(case.case_id.clone());
                }
            }
            None => report.pending += 1,
        }
    }
    report
}

/// Batch plus append-only verdict log. Writes go through one appender.
pub struct AuditStore {
    batch: AuditBatch,
    log_path: PathBuf,
    inner: Mutex<StoreInner>,
}

struct StoreInner {
    appender: JsonlAppender,
    latest: HashMap<String, Verdict>,
}

impl AuditStore {
    /// Opens the log, replaying existing lines.
    pub fn open(batch: AuditBatch, log_path: &Path) -> Result<Self, AuditError> {
        let io_err = |source| AuditError::Io { path: log_path.to_owned(), source };
        let log: Vec<Verdict> = read_jsonl_or_empty(log_path).map_err(io_err)?;
        let appender = JsonlAppender::open(log_path).map_err(io_err)?;
        Ok(Self {
            batch,
            log_path: log_path.to_owned(),
            inner: Mutex::new(StoreInner { appender, latest: replay(&log) }),
        })
    }

    pub fn batch(&self) -> &AuditBatch {
        &self.batch
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn case(&self, id: &str) -> Option<AuditCase> {
        let inner = self.inner.lock().unwrap();
        self.batch.cases.iter().find(|c| c.case_id == id).map(|c| with_status(c, &inner.latest))
    }

    pub fn cases(&self) -> Vec<AuditCase> {
        let inner = self.inner.lock().unwrap();
        self.batch.cases.iter().map(|c| with_status(c, &inner.latest)).collect()
    }

    pub fn latest(&self, id: &str) -> Option<Verdict> {
        self.inner.lock().unwrap().latest.get(id).cloned()
    }

    pub fn report(&self) -> AuditReport {
        audit_report(&self.batch, &self.inner.lock().unwrap().latest)
    }

    pub fn submit(&self, case_id: &str, body: VerdictSubmission) -> Result<Verdict, AuditError> {
        self.submit_at(case_id, body, Utc::now())
    }

    pub fn submit_at(&self, case_id: &str, body: VerdictSubmission, at: DateTime<Utc>) -> Result<Verdict, AuditError> {
        let case = self
            .batch
            .cases
            .iter()
            .find(|c| c.case_id == case_id)
            .ok_or_else(|| AuditError::UnknownCase(case_id.to_owned()))?;
        if let Some(bad) = body.hidden_images.iter().find(|h| !case.image_filenames.contains(h)) {
            return Err(AuditError::Validation(format!("hidden image {bad} is not part of case {case_id}")));
        }
        if body.verdict != VerdictKind::Match && body.rationale.trim().is_empty() {
            return Err(AuditError::Validation(format!("a rationale is required for {}", body.verdict)));
        }
        let verdict = Verdict {
            case_id: case_id.to_owned(),
            verdict: body.verdict,
            rationale: body.rationale,
            hidden_images: body.hidden_images,
            annotator: if body.annotator.trim().is_empty() { "anonymous".into() } else { body.annotator },
            timestamp: at.to_rfc3339_opts(SecondsFormat::Millis, true),
        };
        let mut inner = self.inner.lock().unwrap();
        inner.appender.append(&verdict).map_err(|source| AuditError::Io { path: self.log_path.clone(), source })?;
        let newer = inner.latest.get(case_id).is_none_or(|prev| verdict.time() >= prev.time());
        if newer {
            inner.latest.insert(case_id.to_owned(), verdict.clone());
        }
        Ok(verdict)
    }
}

fn with_status(case: &AuditCase, latest: &HashMap<String, Verdict>) -> AuditCase {
    let mut c = case.clone();
    c.status = if latest.contains_key(&c.case_id) { CaseStatus::Done } else { CaseStatus::Pending };
    c
}
