//! Per-image captions with degenerate-output detection and resumable batches.

use std::collections::{BTreeMap, HashSet};
use std::io;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crawler::{ImageManifest, ImageRecord, ImageSource, MediaStore};
use crate::io::{read_jsonl_or_empty, JsonlAppender};
use crate::kgdata::Qid;
use crate::provider::{CaptionBackend, ProviderError};

/// The fixed captioning instruction sent with every image.
pub const DEFAULT_CAPTION_PROMPT: &str = "Describe the scene, objects, colors, and other details in detail.";
pub const DEFAULT_CAPTION_PROMPT_ID: &str = "caption-default";
pub const DEFAULT_DEGENERATE_THRESHOLD: f64 = 0.5;
/// Shorter outputs are never flagged for repetition.
pub const MIN_TOKENS_FOR_REPETITION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn default_caption() -> Self {
        Self { id: DEFAULT_CAPTION_PROMPT_ID.into(), text: DEFAULT_CAPTION_PROMPT.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateReason {
    EmptyOutput,
    TokenRepetition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Degeneracy {
    pub flag: bool,
    pub reason: Option<DegenerateReason>,
}

/// Lowercased tokens with non-alphanumeric characters removed; empty tokens dropped.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Flags empty output, or output of at least four tokens where the most
/// frequent token makes up more than `threshold` of them. `threshold` is
/// clamped into (0, 1].
pub fn detect_degenerate(text: &str, threshold: f64) -> Degeneracy {
    if text.trim().is_empty() {
        return Degeneracy { flag: true, reason: Some(DegenerateReason::EmptyOutput) };
    }
    let threshold = threshold.clamp(f64::MIN_POSITIVE, 1.0);
    let tokens = normalized_tokens(text);
    if tokens.len() >= MIN_TOKENS_FOR_REPETITION {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &tokens {
            *counts.entry(t).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0);
        if top as f64 / tokens.len() as f64 > threshold {
            return Degeneracy { flag: true, reason: Some(DegenerateReason::TokenRepetition) };
        }
    }
    Degeneracy { flag: false, reason: None }
}

/// One `captions.jsonl` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub filename: String,
    pub qid: Qid,
    pub source: ImageSource,
    pub index: u32,
    pub provider: String,
    pub prompt_id: String,
    pub text: String,
    pub degenerate: bool,
    pub degenerate_reason: Option<DegenerateReason>,
}

impl Caption {
    pub fn media_key(&self) -> String {
        format!("{}/{}", self.source, self.filename)
    }
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("cannot read image {}: {source}", path.display())]
    Unreadable { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

fn make_caption(image: &ImageRecord, provider: &str, prompt: &PromptTemplate, text: String, threshold: f64) -> Caption {
    let d = detect_degenerate(&text, threshold);
    Caption {
        filename: image.filename.clone(),
        qid: image.qid.clone(),
        source: image.source,
        index: image.index,
        provider: provider.to_owned(),
        prompt_id: prompt.id.clone(),
        text,
        degenerate: d.flag,
        degenerate_reason: d.reason,
    }
}

/// Captions one stored image.
pub fn caption_image(
    image: &ImageRecord,
    store: &MediaStore,
    backend: &dyn CaptionBackend,
    prompt: &PromptTemplate,
    degenerate_threshold: f64,
) -> Result<Caption, CaptionError> {
    let path = store.path_of(image);
    let bytes = std::fs::read(&path).map_err(|source| CaptionError::Unreadable { path, source })?;
    let text = backend.caption(&bytes, &prompt.text)?;
    Ok(make_caption(image, backend.model_name(), prompt, text, degenerate_threshold))
}

#[derive(Clone, Debug)]
pub struct CaptionPaths {
    pub captions: PathBuf,
    pub journal: PathBuf,
}

impl CaptionPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { captions: dir.join("captions.jsonl"), journal: dir.join("journal").join("captions.jsonl") }
    }
}

#[derive(Clone, Debug)]
pub struct CaptionOptions {
    /// Images in flight at once.
    pub concurrency: usize,
    /// Stop after this many new captions.
    pub limit: Option<usize>,
    pub degenerate_threshold: f64,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self { concurrency: 4, limit: None, degenerate_threshold: DEFAULT_DEGENERATE_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub key: String,
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub captioned: usize,
    pub degenerate: usize,
    pub skipped: usize,
    pub already_done: usize,
    pub errors: Vec<ItemError>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Hash)]
struct CaptionJournalKey {
    key: String,
    provider: String,
    prompt_id: String,
}

/// Captions every manifest image not yet journaled for this (provider, prompt).
/// Output rows follow manifest order; per-image failures are reported, not fatal.
pub fn caption_batch(
    manifest: &ImageManifest,
    store: &MediaStore,
    backend: &dyn CaptionBackend,
    prompt: &PromptTemplate,
    paths: &CaptionPaths,
    options: &CaptionOptions,
) -> Result<CaptionReport, CaptionError> {
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| CaptionError::Io { path, source }
    };
    let done: HashSet<CaptionJournalKey> =
        read_jsonl_or_empty::<CaptionJournalKey>(&paths.journal).map_err(io_err(&paths.journal))?.into_iter().collect();
    let mut out = JsonlAppender::open(&paths.captions).map_err(io_err(&paths.captions))?;
    let mut journal = JsonlAppender::open(&paths.journal).map_err(io_err(&paths.journal))?;

    let provider = backend.model_name().to_owned();
    let key_of = |r: &ImageRecord| CaptionJournalKey {
        key: r.media_key(),
        provider: provider.clone(),
        prompt_id: prompt.id.clone(),
    };

    let records = manifest.sorted();
    let mut report = CaptionReport::default();
    let mut todo = Vec::new();
    for r in &records {
        if done.contains(&key_of(r)) {
            report.already_done += 1;
        } else {
            todo.push(r);
        }
    }
    if let Some(limit) = options.limit {
        todo.truncate(limit);
    }

    for chunk in todo.chunks(options.concurrency.max(1)) {
        let results: Vec<Result<Caption, CaptionError>> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|r| s.spawn(|| caption_image(r, store, backend, prompt, options.degenerate_threshold)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("caption worker panicked")).collect()
        });
        for (record, result) in chunk.iter().zip(results) {
            match result {
                Ok(caption) => {
                    out.append(&caption).map_err(io_err(&paths.captions))?;
                    journal.append(&key_of(record)).map_err(io_err(&paths.journal))?;
                    report.captioned += 1;
                    if caption.degenerate {
                        report.degenerate += 1;
                    }
                }
                Err(e) => {
                    let kind = match &e {
                        CaptionError::Unreadable { .. } => "unreadable",
                        CaptionError::Provider(p) if p.is_transient() => "transient",
                        CaptionError::Provider(_) => "permanent",
                        CaptionError::Io { .. } => "io",
                    };
                    tracing::warn!(image = %record.media_key(), error = %e, "caption skipped");
                    report.skipped += 1;
                    report.errors.push(ItemError {
                        key: record.media_key(),
                        kind: kind.into(),
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(report)
}
