use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};

use image::ImageReader;

use super::{image_filename, CrawlError, Fetcher, ImageCandidate, ImageExt, ImageRecord, ImageSource, Provenance};
use crate::io::{read_jsonl_or_empty, sha256_hex, write_jsonl};
use crate::kgdata::{Entity, Qid};

/// Image bytes live at `{base}/media/{source}/{filename}` unless a record
/// carries an explicit `bytes_path` (relative to `base`).
#[derive(Clone, Debug)]
pub struct MediaStore {
    base: PathBuf,
}

impl MediaStore {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self { base: base.into() }
    }

    pub fn base(&self) -> &Path {
        &self.base
    }

    pub fn default_path(&self, source: ImageSource, filename: &str) -> PathBuf {
        self.base.join("media").join(source.as_str()).join(filename)
    }

    pub fn path_of(&self, record: &ImageRecord) -> PathBuf {
        match &record.bytes_path {
            Some(p) => self.base.join(p),
            None => self.default_path(record.source, &record.filename),
        }
    }

    pub fn read(&self, record: &ImageRecord) -> io::Result<Vec<u8>> {
        fs::read(self.path_of(record))
    }

    fn write(&self, source: ImageSource, filename: &str, bytes: &[u8]) -> Result<PathBuf, CrawlError> {
        let path = self.default_path(source, filename);
        let io_err = |source| CrawlError::Io { path: path.clone(), source };
        fs::create_dir_all(path.parent().unwrap()).map_err(io_err)?;
        fs::write(&path, bytes).map_err(io_err)?;
        Ok(path)
    }
}

/// The `images.jsonl` rows of one run or dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageManifest {
    pub records: Vec<ImageRecord>,
}

impl ImageManifest {
    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Self { records: read_jsonl_or_empty(path)? })
    }

    /// Writes rows ordered by (qid, source, index).
    pub fn save(&self, path: &Path) -> io::Result<()> {
        write_jsonl(path, &self.sorted())
    }

    pub fn sorted(&self) -> Vec<ImageRecord> {
        let mut rows = self.records.clone();
        rows.sort_by(|a, b| (&a.qid, a.source, a.index).cmp(&(&b.qid, b.source, b.index)));
        rows
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn find_url(&self, qid: &Qid, source: ImageSource, url: &str) -> Option<&ImageRecord> {
        self.records
            .iter()
            .find(|r| &r.qid == qid && r.source == source && r.provenance.image_url.as_deref() == Some(url))
    }

    pub fn find_hash(&self, qid: &Qid, sha256: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| &r.qid == qid && r.sha256 == sha256)
    }

    pub fn next_index(&self, qid: &Qid, source: ImageSource) -> u32 {
        self.records.iter().filter(|r| &r.qid == qid && r.source == source).map(|r| r.index + 1).max().unwrap_or(0)
    }

    pub fn for_entity<'a>(&'a self, qid: &'a Qid) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.records.iter().filter(move |r| &r.qid == qid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoreOutcome {
    Stored(ImageRecord),
    /// Same image URL was already stored for this entity.
    Existing(ImageRecord),
    /// Same bytes already stored for this entity under another URL.
    Duplicate {
        existing: ImageRecord,
    },
}

impl StoreOutcome {
    pub fn record(&self) -> &ImageRecord {
        match self {
            StoreOutcome::Stored(r) | StoreOutcome::Existing(r) => r,
            StoreOutcome::Duplicate { existing } => existing,
        }
    }
}

/// Sniffed raster format and pixel dimensions.
pub fn probe_image(bytes: &[u8]) -> Option<(ImageExt, u32, u32)> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format().ok()?;
    let ext = match reader.format()? {
        image::ImageFormat::Jpeg => ImageExt::Jpg,
        image::ImageFormat::Png => ImageExt::Png,
        image::ImageFormat::Gif => ImageExt::Gif,
        image::ImageFormat::WebP => ImageExt::Webp,
        _ => return None,
    };
    let (w, h) = reader.into_dimensions().ok()?;
    Some((ext, w, h))
}

/// Stores already-downloaded bytes under the next free index for (qid, source).
pub fn store_bytes(
    candidate: &ImageCandidate,
    qid: &Qid,
    source: ImageSource,
    bytes: &[u8],
    store: &MediaStore,
    manifest: &mut ImageManifest,
) -> Result<StoreOutcome, CrawlError> {
    if let Some(existing) = manifest.find_url(qid, source, &candidate.image_url) {
        return Ok(StoreOutcome::Existing(existing.clone()));
    }
    let sha256 = sha256_hex(bytes);
    if let Some(existing) = manifest.find_hash(qid, &sha256) {
        return Ok(StoreOutcome::Duplicate { existing: existing.clone() });
    }
    let (ext, width, height) =
        probe_image(bytes).ok_or_else(|| CrawlError::Undecodable(candidate.image_url.clone()))?;
    let index = manifest.next_index(qid, source);
    let filename = image_filename(qid, index, ext);
    store.write(source, &filename, bytes)?;
    let record = ImageRecord {
        qid: qid.clone(),
        index,
        filename,
        source,
        provenance: Provenance {
            page_url: Some(candidate.page_url.clone()),
            image_url: Some(candidate.image_url.clone()),
            author: candidate.author.clone(),
            date: candidate.date.clone(),
        },
        width,
        height,
        mime: ext.mime().to_owned(),
        sha256,
        bytes_path: None,
    };
    manifest.records.push(record.clone());
    Ok(StoreOutcome::Stored(record))
}

/// Downloads and stores one accepted candidate. Re-storing a known URL is a no-op.
pub fn store_image(
    candidate: &ImageCandidate,
    entity: &Entity,
    source: ImageSource,
    fetcher: &dyn Fetcher,
    store: &MediaStore,
    manifest: &mut ImageManifest,
) -> Result<StoreOutcome, CrawlError> {
    if let Some(existing) = manifest.find_url(&entity.qid, source, &candidate.image_url) {
        return Ok(StoreOutcome::Existing(existing.clone()));
    }
    let bytes = fetcher.fetch_bytes(&candidate.image_url)?;
    store_bytes(candidate, &entity.qid, source, &bytes, store, manifest)
}
