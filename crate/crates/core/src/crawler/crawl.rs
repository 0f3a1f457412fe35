use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{
    extract_images, fetch_entity_page, filter_images, probe_image, store_bytes, CrawlError, Fetcher, FilterPolicy,
    ImageManifest, ImageSource, MediaStore, StoreOutcome,
};
use crate::io::{read_jsonl_or_empty, JsonlAppender};
use crate::kgdata::{Dataset, Entity};

/// Files a crawl reads and writes, all inside one run directory.
#[derive(Clone, Debug)]
pub struct CrawlPaths {
    pub manifest: PathBuf,
    pub journal: PathBuf,
    pub retry_journal: PathBuf,
}

impl CrawlPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            manifest: dir.join("images.jsonl"),
            journal: dir.join("journal").join("crawl.jsonl"),
            retry_journal: dir.join("journal").join("crawl_retry.jsonl"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrawlOptions {
    pub workers: usize,
    /// Skip entities already in the journal. Without it the journal and all
    /// retrieved manifest rows are discarded first.
    pub resume: bool,
}

impl Default for CrawlOptions {
    fn default() -> Self {
        Self { workers: 4, resume: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub qid: String,
    pub status: String,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailedEntity {
    pub qid: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrawlReport {
    pub entities_total: usize,
    /// Entities completed in this run.
    pub entities_crawled: usize,
    /// Entities skipped because the journal already had them.
    pub entities_already_done: usize,
    pub entities_skipped_not_found: Vec<String>,
    pub entities_failed: Vec<FailedEntity>,
    /// New images stored in this run.
    pub images_retrieved: usize,
    pub images_rejected: BTreeMap<String, usize>,
    pub duplicates_skipped: usize,
    /// Over the whole manifest, retrieved source only.
    pub entities_with_images: usize,
    pub total_retrieved_images: usize,
    /// Retrieved images per entity over the whole manifest.
    pub per_entity: BTreeMap<String, usize>,
}

struct Shared {
    manifest: ImageManifest,
    manifest_log: JsonlAppender,
    journal: JsonlAppender,
    retry: JsonlAppender,
    report: CrawlReport,
}

enum EntityOutcome {
    Done(usize),
    NotFound,
    Failed(String),
}

fn crawl_entity(
    entity: &Entity,
    policy: &FilterPolicy,
    fetcher: &dyn Fetcher,
    store: &MediaStore,
    shared: &Mutex<Shared>,
) -> EntityOutcome {
    let page = match fetch_entity_page(fetcher, &entity.name) {
        Ok(p) => p,
        Err(CrawlError::NotFound(what)) => {
            tracing::info!(qid = %entity.qid, %what, "entity page not found; skipped");
            return EntityOutcome::NotFound;
        }
        Err(CrawlError::EmptyName) => return EntityOutcome::NotFound,
        Err(e) => return EntityOutcome::Failed(e.to_string()),
    };
    let filtered = filter_images(&extract_images(&page), policy);
    {
        let mut s = shared.lock().unwrap();
        for (_, reason) in &filtered.rejected {
            *s.report.images_rejected.entry(reason.to_string()).or_default() += 1;
        }
    }

    let mut stored = 0;
    let mut first_error = None;
    for candidate in &filtered.accepted {
        let known = shared
            .lock()
            .unwrap()
            .manifest
            .find_url(&entity.qid, ImageSource::Retrieved, &candidate.image_url)
            .is_some();
        if known {
            continue;
        }
        let bytes = match fetcher.fetch_bytes(&candidate.image_url) {
            Ok(b) => b,
            Err(e) if e.is_transient() => {
                first_error.get_or_insert(e.to_string());
                continue;
            }
            Err(e) => {
                tracing::warn!(url = %candidate.image_url, error = %e, "image download failed");
                let mut s = shared.lock().unwrap();
                *s.report.images_rejected.entry("download_failed".into()).or_default() += 1;
                continue;
            }
        };
        let reject = match probe_image(&bytes) {
            None => Some("undecodable"),
            Some((ext, _, _)) if !policy.allowed_mimes.contains(ext.mime()) => Some("bad_mime"),
            Some((_, w, h)) if policy.too_small(Some(w), Some(h)) => Some("too_small"),
            Some(_) => None,
        };
        let mut s = shared.lock().unwrap();
        if let Some(reason) = reject {
            *s.report.images_rejected.entry(reason.into()).or_default() += 1;
            continue;
        }
        let Shared { manifest, manifest_log, report, .. } = &mut *s;
        match store_bytes(candidate, &entity.qid, ImageSource::Retrieved, &bytes, store, manifest) {
            Ok(StoreOutcome::Stored(record)) => {
                if let Err(e) = manifest_log.append(&record) {
                    first_error.get_or_insert(e.to_string());
                }
                stored += 1;
                report.images_retrieved += 1;
            }
            Ok(StoreOutcome::Existing(_)) => {}
            Ok(StoreOutcome::Duplicate { .. }) => report.duplicates_skipped += 1,
            Err(e) => {
                first_error.get_or_insert(e.to_string());
            }
        }
    }
    match first_error {
        Some(e) => EntityOutcome::Failed(e),
        None => EntityOutcome::Done(stored),
    }
}

/// Crawls every entity not yet journaled. Single-entity failures are recorded
/// in the report and the retry journal; they never abort the crawl.
pub fn crawl_dataset(
    dataset: &Dataset,
    policy: &FilterPolicy,
    fetcher: &dyn Fetcher,
    store: &MediaStore,
    paths: &CrawlPaths,
    options: &CrawlOptions,
) -> Result<CrawlReport, CrawlError> {
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| CrawlError::Io { path, source }
    };

    let mut manifest = ImageManifest::load(&paths.manifest).map_err(io_err(&paths.manifest))?;
    if !options.resume {
        manifest.records.retain(|r| r.source != ImageSource::Retrieved);
        for p in [&paths.journal, &paths.retry_journal] {
            if p.exists() {
                std::fs::remove_file(p).map_err(io_err(p))?;
            }
        }
    }
    manifest.save(&paths.manifest).map_err(io_err(&paths.manifest))?;

    let journal: Vec<JournalEntry> = read_jsonl_or_empty(&paths.journal).map_err(io_err(&paths.journal))?;
    let done: HashSet<String> = journal.into_iter().map(|j| j.qid).collect();
    let pending: Vec<&Entity> = dataset.entities.iter().filter(|e| !done.contains(e.qid.as_str())).collect();

    let shared = Mutex::new(Shared {
        manifest,
        manifest_log: JsonlAppender::open(&paths.manifest).map_err(io_err(&paths.manifest))?,
        journal: JsonlAppender::open(&paths.journal).map_err(io_err(&paths.journal))?,
        retry: JsonlAppender::open(&paths.retry_journal).map_err(io_err(&paths.retry_journal))?,
        report: CrawlReport {
            entities_total: dataset.entities.len(),
            entities_already_done: dataset.entities.len() - pending.len(),
            ..Default::default()
        },
    });

    let cursor = AtomicUsize::new(0);
    let workers = options.workers.clamp(1, pending.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(entity) = pending.get(i) else { break };
                let outcome = crawl_entity(entity, policy, fetcher, store, &shared);
                let mut s = shared.lock().unwrap();
                let qid = entity.qid.to_string();
                let logged = match outcome {
                    EntityOutcome::Done(images) => {
                        s.report.entities_crawled += 1;
                        s.journal.append(&JournalEntry { qid, status: "done".into(), images })
                    }
                    EntityOutcome::NotFound => {
                        s.report.entities_skipped_not_found.push(qid.clone());
                        s.journal.append(&JournalEntry { qid, status: "not_found".into(), images: 0 })
                    }
                    EntityOutcome::Failed(error) => {
                        let failed = FailedEntity { qid, error };
                        let r = s.retry.append(&failed);
                        s.report.entities_failed.push(failed);
                        r
                    }
                };
                if let Err(e) = logged {
                    tracing::error!(error = %e, "journal write failed");
                }
            });
        }
    });

    let Shared { manifest, mut report, .. } = shared.into_inner().unwrap();
    manifest.save(&paths.manifest).map_err(io_err(&paths.manifest))?;

    report.entities_skipped_not_found.sort();
    report.entities_failed.sort();
    for r in manifest.records.iter().filter(|r| r.source == ImageSource::Retrieved) {
        *report.per_entity.entry(r.qid.to_string()).or_default() += 1;
    }
    report.entities_with_images = report.per_entity.len();
    report.total_retrieved_images = report.per_entity.values().sum();
    Ok(report)
}
