//! End-to-end run: crawl, caption, fuse, variants, evaluation.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioning::{caption_batch, Caption, CaptionOptions, CaptionPaths, CaptionReport, PromptTemplate};
use crate::crawler::{
    crawl_dataset, CrawlOptions, CrawlPaths, CrawlReport, Fetcher, FilterPolicy, HttpFetcher, ImageManifest,
    ImageRecord, ImageSource, MediaStore, MockFetcher, Politeness,
};
use crate::fusion::{
    fuse_batch, write_variants, FusedSummary, FusionOptions, FusionPaths, FusionReport, Variant, VariantReport,
};
use crate::io::{read_json, read_jsonl_or_empty, sha256_hex, write_json, write_jsonl};
use crate::kgdata::{load_dataset, Dataset, DatasetFormat};
use crate::linkpred::{
    load_image_features, rank_rows, run_ablation_with, AblationRow, ExperimentConfig, ExperimentOutcome, FilterMode,
    HyperParams, ImageFeatureRow, ModalitySetting, DEFAULT_TEXT_DIM,
};
use crate::provider::ProviderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FetcherConfig {
    Mock,
    /// Page URL template containing `{title}`.
    Http {
        page_url_template: String,
    },
}

impl Default for FetcherConfig {
    fn default() -> Self {
        FetcherConfig::Http { page_url_template: "https://en.wikipedia.org/wiki/{title}".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub fetcher: FetcherConfig,
    #[serde(default)]
    pub politeness: Politeness,
    #[serde(default)]
    pub filter: FilterPolicy,
    pub caption_provider: ProviderConfig,
    pub llm_provider: ProviderConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<ModalitySetting>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub ranking: FilterMode,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
    #[serde(default = "default_retries")]
    pub fusion_retries: u32,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub image_features: Option<PathBuf>,
}

fn default_variant() -> Variant {
    Variant::Fusion
}
fn default_modalities() -> Vec<ModalitySetting> {
    ["structure", "t+g"].iter().map(|s| s.parse().unwrap()).collect()
}
fn default_text_dim() -> usize {
    DEFAULT_TEXT_DIM
}
fn default_retries() -> u32 {
    1
}
fn default_workers() -> usize {
    4
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            output: output.into(),
            fetcher: FetcherConfig::default(),
            politeness: Politeness::default(),
            filter: FilterPolicy::default(),
            caption_provider: ProviderConfig::mock(),
            llm_provider: ProviderConfig::mock(),
            variant: default_variant(),
            modalities: default_modalities(),
            seed: 0,
            hyper: HyperParams::default(),
            ranking: FilterMode::Filtered,
            text_dim: DEFAULT_TEXT_DIM,
            fusion_retries: default_retries(),
            workers: default_workers(),
            image_features: None,
        }
    }

    /// Mock providers and, unless a page template is set, the mock fetcher.
    pub fn with_mocks(mut self) -> Self {
        self.caption_provider = ProviderConfig::mock();
        self.llm_provider = ProviderConfig::mock();
        if self.fetcher == FetcherConfig::default() {
            self.fetcher = FetcherConfig::Mock;
        }
        self
    }

    /// Hash of the config with the output directory blanked, so identical
    /// settings written to different places share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())[..16].to_owned()
    }

    fn hyper(&self) -> HyperParams {
        HyperParams { seed: self.seed, ..self.hyper.clone() }
    }

    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        self.modalities
            .iter()
            .map(|m| ExperimentConfig {
                modality: m.clone(),
                variant: Some(self.variant),
                filter: self.ranking,
                hyper: self.hyper(),
                text_dim: self.text_dim,
            })
            .collect()
    }
}

/// A report as written to disk, stamped with the producing config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_fingerprint: String,
    pub config: RunConfig,
    pub report: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prepare,
    Crawl,
    Caption,
    Fuse,
    Variants,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Prepare, Stage::Crawl, Stage::Caption, Stage::Fuse, Stage::Variants, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Crawl => "crawl",
            Stage::Caption => "caption",
            Stage::Fuse => "fuse",
            Stage::Variants => "variants",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Error)]
#[error("stage {} failed: {message}", stage.name())]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

fn fail(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError { stage, message }
}

/// Fixed layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("images.jsonl")
    }
    pub fn captions(&self) -> PathBuf {
        self.root.join("captions.jsonl")
    }
    pub fn summaries(&self) -> PathBuf {
        self.root.join("summaries.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn report(&self, stage: Stage) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", stage.name()))
    }
    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("journal").join(format!("{}.done", stage.name()))
    }
    pub fn eval_dir(&self, setting: &ModalitySetting) -> PathBuf {
        self.root.join("eval").join(setting.name().replace('+', "_"))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config_fingerprint: String,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Copies the dataset's original images to `media/original/` and puts their
/// rows in the run manifest, keeping any retrieved rows.
pub fn prepare_run_dir(dataset_root: &Path, dataset: &Dataset, paths: &RunPaths) -> Result<(), String> {
    let store = MediaStore::new(&paths.root);
    let mut manifest = ImageManifest::load(&paths.manifest()).map_err(|e| e.to_string())?;
    manifest.records.retain(|r| r.source != ImageSource::Original);
    for record in &dataset.images {
        let src = dataset_root.join(record.bytes_path.clone().unwrap_or_else(|| format!("images/{}", record.filename)));
        let dst = store.default_path(ImageSource::Original, &record.filename);
        fs::create_dir_all(dst.parent().unwrap()).map_err(|e| e.to_string())?;
        fs::copy(&src, &dst).map_err(|e| format!("{}: {e}", src.display()))?;
        manifest.records.push(ImageRecord { bytes_path: None, source: ImageSource::Original, ..record.clone() });
    }
    manifest.save(&paths.manifest()).map_err(|e| e.to_string())
}

fn fetcher(config: &RunConfig) -> Result<Box<dyn Fetcher>, String> {
    Ok(match &config.fetcher {
        FetcherConfig::Mock => Box::new(MockFetcher),
        FetcherConfig::Http { page_url_template } => {
            Box::new(HttpFetcher::new(page_url_template.clone(), config.politeness.clone()).map_err(|e| e.to_string())?)
        }
    })
}

/// Dataset with the run's manifest attached.
pub fn dataset_with_manifest(dataset: &Dataset, paths: &RunPaths) -> Result<Dataset, String> {
    let manifest = ImageManifest::load(&paths.manifest()).map_err(|e| e.to_string())?;
    dataset.with_images(manifest.sorted()).map_err(|e| e.to_string())
}

/// Captions produced by this config's provider and prompt.
pub fn run_captions(config: &RunConfig, paths: &RunPaths) -> io::Result<Vec<Caption>> {
    let prompt = PromptTemplate::default_caption();
    let provider = config.caption_provider.model_name();
    let rows: Vec<Caption> = read_jsonl_or_empty(&paths.captions())?;
    Ok(rows.into_iter().filter(|c| c.provider == provider && c.prompt_id == prompt.id).collect())
}

pub fn write_stamped<T: Serialize>(config: &RunConfig, path: &Path, report: T) -> Result<(), String> {
    let stamped = Stamped { config_fingerprint: config.fingerprint(), config: config.clone(), report };
    write_json(path, &stamped).map_err(|e| format!("{}: {e}", path.display()))
}

fn run_stage(config: &RunConfig, dataset: &Dataset, paths: &RunPaths, stage: Stage) -> Result<(), PipelineError> {
    let f = fail(stage);
    match stage {
        Stage::Prepare => {
            prepare_run_dir(&config.dataset, dataset, paths).map_err(&f)?;
            write_json(&paths.config(), config).map_err(|e| f(e.to_string()))?;
        }
        Stage::Crawl => {
            let fetcher = fetcher(config).map_err(&f)?;
            let options = CrawlOptions { workers: config.workers, resume: true };
            let report: CrawlReport = crawl_dataset(
                dataset,
                &config.filter,
                fetcher.as_ref(),
                &MediaStore::new(&paths.root),
                &CrawlPaths::in_dir(&paths.root),
                &options,
            )
            .map_err(|e| f(e.to_string()))?;
            write_stamped(config, &paths.report(stage), report).map_err(&f)?;
        }
        Stage::Caption => {
            let backend = config.caption_provider.caption_backend().map_err(|e| f(e.to_string()))?;
            let manifest = ImageManifest::load(&paths.manifest()).map_err(|e| f(e.to_string()))?;
            let options = CaptionOptions { concurrency: config.workers, ..CaptionOptions::default() };
            let report: CaptionReport = caption_batch(
                &manifest,
                &MediaStore::new(&paths.root),
                backend.as_ref(),
                &PromptTemplate::default_caption(),
                &CaptionPaths::in_dir(&paths.root),
                &options,
            )
            .map_err(|e| f(e.to_string()))?;
            let failed = !report.errors.is_empty() && report.captioned == 0 && report.already_done == 0;
            let first = report.errors.first().map(|e| e.message.clone());
            write_stamped(config, &paths.report(stage), report).map_err(&f)?;
            if failed {
                return Err(f(format!("no image could be captioned ({})", first.unwrap_or_default())));
            }
        }
        Stage::Fuse => {
            let llm = config.llm_provider.llm_backend().map_err(|e| f(e.to_string()))?;
            let captions = run_captions(config, paths).map_err(|e| f(e.to_string()))?;
            let options = FusionOptions { retries: config.fusion_retries, concurrency: config.workers };
            let report: FusionReport =
                fuse_batch(dataset, &captions, llm.as_ref(), &FusionPaths::in_dir(&paths.root), &options)
                    .map_err(|e| f(e.to_string()))?;
            let failed = !report.errors.is_empty() && report.fused == 0 && report.already_done == 0;
            let first = report.errors.first().map(|e| e.message.clone());
            write_stamped(config, &paths.report(stage), report).map_err(&f)?;
            if failed {
                return Err(f(format!("no entity could be fused ({})", first.unwrap_or_default())));
            }
        }
        Stage::Variants => {
            let captions = run_captions(config, paths).map_err(|e| f(e.to_string()))?;
            let variants = [Variant::GOriginal, Variant::GNew, Variant::GCombined];
            let report: VariantReport =
                write_variants(dataset, &captions, &variants, &paths.summaries()).map_err(|e| f(e.to_string()))?;
            write_stamped(config, &paths.report(stage), report).map_err(&f)?;
        }
        Stage::Eval => {
            let summaries: Vec<FusedSummary> = read_jsonl_or_empty(&paths.summaries()).map_err(|e| f(e.to_string()))?;
            let images: Option<Vec<ImageFeatureRow>> = match &config.image_features {
                Some(p) => Some(load_image_features(p).map_err(|e| f(e.to_string()))?),
                None => None,
            };
            let experiments = config.experiments();
            let mut written: Result<(), String> = Ok(());
            let rows: Vec<AblationRow> =
                run_ablation_with(dataset, &summaries, images.as_deref(), &experiments, |i, outcome| {
                    if written.is_ok() {
                        written = write_eval_dir(&paths.eval_dir(&experiments[i].modality), dataset, outcome);
                    }
                });
            written.map_err(&f)?;
            write_stamped(config, &paths.metrics(), rows).map_err(&f)?;
        }
    }
    Ok(())
}

/// Writes `metrics.json`, `ranks.jsonl`, `model.json` and `train_log.json` for one experiment.
pub fn write_eval_dir(dir: &Path, dataset: &Dataset, outcome: &ExperimentOutcome) -> Result<(), String> {
    let err = |e: io::Error| format!("{}: {e}", dir.display());
    write_json(&dir.join("metrics.json"), &outcome.report).map_err(err)?;
    write_jsonl(&dir.join("ranks.jsonl"), &rank_rows(dataset, &outcome.ranks)).map_err(err)?;
    write_json(&dir.join("model.json"), &outcome.model).map_err(err)?;
    write_json(&dir.join("train_log.json"), &outcome.log).map_err(err)
}

/// Runs every stage in order. A stage whose marker carries the current config
/// fingerprint is skipped; a failing stage stops the run.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineSummary, PipelineError> {
    let paths = RunPaths::new(&config.output);
    fs::create_dir_all(&paths.root).map_err(|e| fail(Stage::Prepare)(e.to_string()))?;
    let fingerprint = config.fingerprint();
    let base = load_dataset(&config.dataset, DatasetFormat::TsvTriplesJsonlEntities)
        .map_err(|e| fail(Stage::Prepare)(e.to_string()))?;
    let mut summary = PipelineSummary { config_fingerprint: fingerprint.clone(), ..PipelineSummary::default() };

    for stage in Stage::ALL {
        let marker = paths.marker(stage);
        if fs::read_to_string(&marker).is_ok_and(|m| m.trim() == fingerprint) {
            summary.skipped.push(stage);
            continue;
        }
        let dataset = match stage {
            Stage::Prepare | Stage::Crawl | Stage::Caption => base.clone(),
            _ => dataset_with_manifest(&base, &paths).map_err(fail(stage))?,
        };
        tracing::info!(stage = stage.name(), "stage start");
        run_stage(config, &dataset, &paths, stage)?;
        fs::create_dir_all(marker.parent().unwrap()).map_err(|e| fail(stage)(e.to_string()))?;
        fs::write(&marker, format!("{fingerprint}\n")).map_err(|e| fail(stage)(e.to_string()))?;
        summary.executed.push(stage);
    }
    Ok(summary)
}

/// Reads the frozen config of an existing run directory.
pub fn load_run_config(run_dir: &Path) -> io::Result<RunConfig> {
    read_json(&RunPaths::new(run_dir).config())
}
