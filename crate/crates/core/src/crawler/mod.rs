//! Image retrieval from entity pages with provenance.
//!
//! Pages are resolved by entity name through a [`Fetcher`], images are
//! extracted in document order, filtered by a [`FilterPolicy`], and stored
//! under `{QID}_{index}.{ext}` names in a [`MediaStore`].

mod crawl;
mod extract;
mod fetch;
mod filter;
mod store;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgdata::Qid;

pub use crawl::{crawl_dataset, CrawlOptions, CrawlPaths, CrawlReport, FailedEntity, JournalEntry};
pub use extract::extract_images;
pub use fetch::{fetch_entity_page, synthetic_png, Fetcher, HttpFetcher, MockFetcher, PageDocument, Politeness};
pub use filter::{filter_images, FilterOutcome, FilterPolicy, RejectReason};
pub use store::{probe_image, store_bytes, store_image, ImageManifest, MediaStore, StoreOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Original,
    Retrieved,
}

impl ImageSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageSource::Original => "original",
            ImageSource::Retrieved => "retrieved",
        }
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raster formats accepted into the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageExt {
    Jpg,
    Png,
    Gif,
    Webp,
}

impl ImageExt {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageExt::Jpg => "jpg",
            ImageExt::Png => "png",
            ImageExt::Gif => "gif",
            ImageExt::Webp => "webp",
        }
    }

    pub fn from_ext(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "jpg" | "jpeg" => Some(ImageExt::Jpg),
            "png" => Some(ImageExt::Png),
            "gif" => Some(ImageExt::Gif),
            "webp" => Some(ImageExt::Webp),
            _ => None,
        }
    }

    pub fn from_mime(mime: &str) -> Option<Self> {
        match mime {
            "image/jpeg" => Some(ImageExt::Jpg),
            "image/png" => Some(ImageExt::Png),
            "image/gif" => Some(ImageExt::Gif),
            "image/webp" => Some(ImageExt::Webp),
            _ => None,
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            ImageExt::Jpg => "image/jpeg",
            ImageExt::Png => "image/png",
            ImageExt::Gif => "image/gif",
            ImageExt::Webp => "image/webp",
        }
    }
}

/// `Q727_0.jpg`
pub fn image_filename(qid: &Qid, index: u32, ext: ImageExt) -> String {
    format!("{qid}_{index}.{}", ext.as_str())
}

/// Inverse of [`image_filename`]; `None` when the name does not follow the grammar.
pub fn parse_image_filename(name: &str) -> Option<(Qid, u32, ImageExt)> {
    let (stem, ext) = name.rsplit_once('.')?;
    if ext != ext.to_ascii_lowercase() || ext == "jpeg" {
        return None;
    }
    let ext = ImageExt::from_ext(ext)?;
    let (qid, index) = stem.rsplit_once('_')?;
    if index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let index: u32 = index.parse().ok()?;
    Some((Qid::parse(qid).ok()?, index, ext))
}

/// Mime type guessed from a URL path's extension.
pub fn mime_from_url(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let ext = path.rsplit('/').next().and_then(|seg| seg.rsplit_once('.')).map(|(_, e)| e);
    match ext.map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg".into(),
        Some("png") => "image/png".into(),
        Some("gif") => "image/gif".into(),
        Some("webp") => "image/webp".into(),
        Some("svg") => "image/svg+xml".into(),
        Some("tif" | "tiff") => "image/tiff".into(),
        Some("bmp") => "image/bmp".into(),
        _ => "application/octet-stream".into(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCandidate {
    pub page_url: String,
    pub image_url: String,
    pub mime: String,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub author: Option<String>,
    pub date: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub page_url: Option<String>,
    pub image_url: Option<String>,
    pub author: Option<String>,
    pub date: Option<String>,
}

/// One stored image. Serialized as a flat `images.jsonl` row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub qid: Qid,
    pub index: u32,
    pub filename: String,
    pub source: ImageSource,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub width: u32,
    pub height: u32,
    pub mime: String,
    pub sha256: String,
    /// Location of the bytes relative to the manifest's directory, when they
    /// do not live at the media store's default `media/{source}/{filename}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_path: Option<String>,
}

impl ImageRecord {
    /// `{source}/{filename}`, unique across sources for one manifest.
    pub fn media_key(&self) -> String {
        format!("{}/{}", self.source, self.filename)
    }

    /// Same record under another QID, filename re-rendered.
    pub fn with_qid(&self, qid: Qid) -> Self {
        let ext = self
            .filename
            .rsplit_once('.')
            .and_then(|(_, e)| ImageExt::from_ext(e))
            .or_else(|| ImageExt::from_mime(&self.mime))
            .unwrap_or(ImageExt::Jpg);
        Self { filename: image_filename(&qid, self.index, ext), qid, ..self.clone() }
    }
}

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error("page not found: {0}")]
    NotFound(String),
    #[error("transient failure for {url} after {attempts} attempt(s): {message}")]
    Transient { url: String, attempts: u32, message: String },
    #[error("request for {url} rejected with status {status}")]
    Permanent { url: String, status: u16 },
    #[error("cannot decode image from {0}")]
    Undecodable(String),
    #[error("invalid url {0}")]
    InvalidUrl(String),
    #[error("empty entity name")]
    EmptyName,
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CrawlError {
    pub fn is_transient(&self) -> bool {
        matches!(self, CrawlError::Transient { .. })
    }
}
