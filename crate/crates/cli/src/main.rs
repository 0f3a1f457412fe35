use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mmkg_core::audit::{router, sample_cases, serve, AuditBatch, AuditState, AuditStore};
use mmkg_core::captioning::{
    caption_batch, CaptionOptions, CaptionPaths, PromptTemplate, DEFAULT_DEGENERATE_THRESHOLD,
};
use mmkg_core::crawler::{crawl_dataset, CrawlOptions, CrawlPaths, FilterPolicy, MediaStore, Politeness};
use mmkg_core::fusion::{fuse_batch, write_variants, FusedSummary, FusionOptions, FusionPaths, Variant};
use mmkg_core::io::{read_json, read_jsonl, read_jsonl_or_empty, write_json, write_jsonl};
use mmkg_core::kgdata::{compute_stats, load_dataset, normalize_ids, write_dataset, Dataset, DatasetFormat, Qid};
use mmkg_core::linkpred::{
    build_features, evaluate, id_triples, load_image_features, rank_delta_report, rank_rows, run_ablation,
    run_experiment, subset_evaluate, train, ExperimentConfig, FilterMode, HyperParams, ImageFeatureRow, KnownTriples,
    ModalitySetting, Model, RankRow, DEFAULT_TEXT_DIM,
};
use mmkg_core::pipeline::{
    dataset_with_manifest, prepare_run_dir, run_pipeline, write_eval_dir, FetcherConfig, RunConfig, RunPaths,
};
use mmkg_core::provider::{ProviderConfig, CAPTION_URL_ENV, LLM_URL_ENV};

#[derive(Parser)]
#[command(name = "mmkg", version, about = "Multi-modal knowledge graph enrichment and evaluation")]
struct Cli {
    /// Use offline mock providers and page fetcher.
    #[arg(long, global = true)]
    mock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Map entity identifiers to QIDs and write the dataset elsewhere.
    Normalize(NormalizeArgs),
    /// Retrieve entity images from wiki pages.
    Crawl(CrawlArgs),
    /// Caption every image in a run directory.
    Caption(CaptionArgs),
    /// Fuse captions per entity, or assemble a caption-derived variant.
    Fuse(FuseArgs),
    /// Assemble the G_o, G_n and G_on variants.
    Variants(DataRun),
    /// Train a model and save it.
    Train(ModelArgs),
    /// Evaluate a model (trained on the fly unless --model is given).
    Eval(EvalArgs),
    /// Train and evaluate a list of configurations.
    Ablate(AblateArgs),
    /// Compare two settings on test triples touching an entity subset.
    SubsetEval(SubsetArgs),
    /// Per-query rank changes between two evaluation directories.
    RankDelta(RankDeltaArgs),
    /// Audit case sampling and the review service.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Run every stage end to end.
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct DataRun {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Include the run's image manifest.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// JSON object from entity name or id to QID.
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrawlArgs {
    #[command(flatten)]
    data: DataRun,
    #[arg(long, default_value_t = 25)]
    max_images: usize,
    #[arg(long, default_value_t = 64)]
    min_dim: u32,
    #[arg(long, default_value_t = 1000)]
    delay_ms: u64,
    #[arg(long)]
    user_agent: Option<String>,
    /// Continue from the crawl journal instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Page URL template containing {title}.
    #[arg(long, default_value = "https://en.wikipedia.org/wiki/{title}")]
    page_url: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    #[arg(long, env = CAPTION_URL_ENV)]
    provider_url: Option<String>,
    #[arg(long, default_value = "captioner")]
    model: String,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = DEFAULT_DEGENERATE_THRESHOLD)]
    degenerate_threshold: f64,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    data: DataRun,
    #[arg(long, default_value = "fusion")]
    variant: Variant,
    #[arg(long, env = LLM_URL_ENV)]
    llm_url: Option<String>,
    #[arg(long, default_value = "llm")]
    model: String,
    /// Corrective retries before falling back to concatenation.
    #[arg(long, default_value_t = 1)]
    retry: u32,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[command(flatten)]
    data: DataRun,
    #[arg(long, default_value = "t+g")]
    modality: ModalitySetting,
    #[arg(long, default_value = "fusion")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 1)]
    negatives: usize,
    #[arg(long, default_value_t = DEFAULT_TEXT_DIM)]
    text_dim: usize,
    /// features_img.jsonl with one vector per entity.
    #[arg(long)]
    image_features: Option<PathBuf>,
    /// Output directory; defaults to <run-dir>/eval/<modality>.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ModelArgs {
    fn experiment(&self, filter: FilterMode) -> ExperimentConfig {
        ExperimentConfig {
            modality: self.modality.clone(),
            variant: Some(self.variant),
            filter,
            hyper: HyperParams {
                dim: self.dim,
                margin: self.margin,
                negatives: self.negatives,
                epochs: self.epochs,
                learning_rate: self.lr,
                seed: self.seed,
            },
            text_dim: self.text_dim,
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| RunPaths::new(&self.data.run_dir).eval_dir(&self.modality))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model_args: ModelArgs,
    #[arg(long, default_value = "filtered")]
    filter: FilterMode,
    /// Evaluate this saved model instead of training.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON document: {"dataset", "run_dir", "image_features"?, "configs": [...]}.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct AblateFile {
    dataset: PathBuf,
    run_dir: PathBuf,
    #[serde(default)]
    image_features: Option<PathBuf>,
    configs: Vec<ExperimentConfig>,
}

#[derive(Args)]
struct SubsetArgs {
    #[command(flatten)]
    data: DataRun,
    /// One QID per line.
    #[arg(long)]
    entities: PathBuf,
    #[arg(long, default_value = "structure")]
    baseline_modality: ModalitySetting,
    #[arg(long, default_value = "t+g")]
    enriched_modality: ModalitySetting,
    #[arg(long, default_value = "fusion")]
    variant: Variant,
    #[arg(long, default_value = "filtered")]
    filter: FilterMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankDeltaArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    enriched: PathBuf,
    /// Print only the first N rows.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Draw a seeded batch of audit cases.
    Sample {
        #[command(flatten)]
        data: DataRun,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to <run-dir>/audit/batch.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the review API (and the UI when --ui is given).
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        batch: PathBuf,
        /// Run directory holding media/; defaults to two levels above the batch file.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Verdict log; defaults to verdicts.jsonl next to the batch.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// RunConfig JSON; other flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    #[arg(long)]
    page_url: Option<String>,
    #[arg(long, env = CAPTION_URL_ENV)]
    provider_url: Option<String>,
    #[arg(long, env = LLM_URL_ENV)]
    llm_url: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fusion")]
    variant: Variant,
    /// Repeatable; defaults to structure and t+g.
    #[arg(long)]
    modality: Vec<ModalitySetting>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    delay_ms: Option<u64>,
    #[arg(long, default_value_t = 1)]
    retry: u32,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mock = cli.mock;
    match cli.command {
        Command::Stats(a) => stats(a),
        Command::Normalize(a) => normalize(a),
        Command::Crawl(a) => crawl(a, mock),
        Command::Caption(a) => caption(a, mock),
        Command::Fuse(a) => fuse(a, mock),
        Command::Variants(a) => variants(&a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::SubsetEval(a) => subset_eval(a),
        Command::RankDelta(a) => rank_delta(a),
        Command::Audit(a) => audit(a),
        Command::Run(a) => run(a, mock),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path, DatasetFormat::TsvTriplesJsonlEntities)
        .with_context(|| format!("loading dataset {}", path.display()))
}

/// Dataset plus the run manifest, when the run directory has one.
fn load_with_run(data: &DataRun) -> Result<Dataset> {
    let ds = load(&data.dataset)?;
    let paths = RunPaths::new(&data.run_dir);
    if paths.manifest().exists() {
        dataset_with_manifest(&ds, &paths).map_err(|e| anyhow!(e))
    } else {
        Ok(ds)
    }
}

fn provider(mock: bool, url: Option<String>, model: &str, what: &str, env: &str, flag: &str) -> Result<ProviderConfig> {
    match (mock, url) {
        (true, _) => Ok(ProviderConfig::mock()),
        (false, Some(url)) => Ok(ProviderConfig::http(url, model)),
        (false, None) => bail!("no {what} endpoint: pass {flag}, set {env}, or use --mock"),
    }
}

fn stats(a: StatsArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let ds = match a.run_dir {
        Some(dir) => dataset_with_manifest(&ds, &RunPaths::new(dir)).map_err(|e| anyhow!(e))?,
        None => ds,
    };
    print_json(&compute_stats(&ds))
}

fn normalize(a: NormalizeArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let mapping: HashMap<String, String> = read_json(&a.mapping).with_context(|| a.mapping.display().to_string())?;
    let out = normalize_ids(&ds, &mapping)?;
    write_dataset(&out, &a.out)?;
    let surrogates = out.entities.iter().filter(|e| e.qid.is_surrogate()).count();
    eprintln!("wrote {} entities ({surrogates} surrogate QIDs) to {}", out.entities.len(), a.out.display());
    Ok(())
}

fn crawl(a: CrawlArgs, mock: bool) -> Result<()> {
    let ds = load(&a.data.dataset)?;
    let paths = RunPaths::new(&a.data.run_dir);
    fs::create_dir_all(&paths.root)?;
    prepare_run_dir(&a.data.dataset, &ds, &paths).map_err(|e| anyhow!(e))?;
    let mut politeness = Politeness { delay_ms: a.delay_ms, ..Politeness::default() };
    if let Some(ua) = a.user_agent {
        politeness.user_agent = ua;
    }
    let fetcher: Box<dyn mmkg_core::crawler::Fetcher> = if mock {
        Box::new(mmkg_core::crawler::MockFetcher)
    } else {
        Box::new(mmkg_core::crawler::HttpFetcher::new(a.page_url, politeness)?)
    };
    let policy = FilterPolicy::default().with_cap(a.max_images).with_min_dim(a.min_dim);
    let report = crawl_dataset(
        &ds,
        &policy,
        fetcher.as_ref(),
        &MediaStore::new(&paths.root),
        &CrawlPaths::in_dir(&paths.root),
        &CrawlOptions { workers: a.workers, resume: a.resume },
    )?;
    write_json(&paths.root.join("reports").join("crawl.json"), &report)?;
    print_json(&report)
}

fn caption(a: CaptionArgs, mock: bool) -> Result<()> {
    let cfg = provider(mock, a.provider_url, &a.model, "caption", CAPTION_URL_ENV, "--provider-url")?;
    let backend = cfg.caption_backend()?;
    let paths = RunPaths::new(&a.run_dir);
    let manifest = mmkg_core::crawler::ImageManifest::load(&paths.manifest())?;
    let options =
        CaptionOptions { concurrency: a.concurrency, limit: a.limit, degenerate_threshold: a.degenerate_threshold };
    let report = caption_batch(
        &manifest,
        &MediaStore::new(&paths.root),
        backend.as_ref(),
        &PromptTemplate::default_caption(),
        &CaptionPaths::in_dir(&paths.root),
        &options,
    )?;
    write_json(&paths.root.join("reports").join("caption.json"), &report)?;
    print_json(&report)?;
    if report.captioned == 0 && !report.errors.is_empty() {
        bail!("no image could be captioned: {}", report.errors[0].message);
    }
    Ok(())
}

/// Captions in the run directory for the provider recorded first, filtered to one provider.
fn captions_for(paths: &RunPaths) -> Result<Vec<mmkg_core::Caption>> {
    let rows: Vec<mmkg_core::Caption> = read_jsonl_or_empty(&paths.captions())?;
    let Some(first) = rows.first() else { return Ok(rows) };
    let (provider, prompt) = (first.provider.clone(), first.prompt_id.clone());
    Ok(rows.into_iter().filter(|c| c.provider == provider && c.prompt_id == prompt).collect())
}

fn fuse(a: FuseArgs, mock: bool) -> Result<()> {
    let ds = load_with_run(&a.data)?;
    let paths = RunPaths::new(&a.data.run_dir);
    let captions = captions_for(&paths)?;
    if a.variant != Variant::Fusion {
        let report = write_variants(&ds, &captions, &[a.variant], &paths.summaries())?;
        return print_json(&report);
    }
    let cfg = provider(mock, a.llm_url, &a.model, "LLM", LLM_URL_ENV, "--llm-url")?;
    let llm = cfg.llm_backend()?;
    let options = FusionOptions { retries: a.retry, concurrency: a.concurrency };
    let report = fuse_batch(&ds, &captions, llm.as_ref(), &FusionPaths::in_dir(&paths.root), &options)?;
    write_json(&paths.root.join("reports").join("fuse.json"), &report)?;
    print_json(&report)
}

fn variants(a: &DataRun) -> Result<()> {
    let ds = load_with_run(a)?;
    let paths = RunPaths::new(&a.run_dir);
    let captions = captions_for(&paths)?;
    let report =
        write_variants(&ds, &captions, &[Variant::GOriginal, Variant::GNew, Variant::GCombined], &paths.summaries())?;
    print_json(&report)
}

fn summaries(run_dir: &Path) -> Result<Vec<FusedSummary>> {
    Ok(read_jsonl_or_empty(&RunPaths::new(run_dir).summaries())?)
}

fn image_rows(path: &Option<PathBuf>) -> Result<Option<Vec<ImageFeatureRow>>> {
    path.as_ref().map(|p| load_image_features(p).with_context(|| p.display().to_string())).transpose()
}

fn train_cmd(a: ModelArgs) -> Result<()> {
    let ds = load_with_run(&a.data)?;
    let config = a.experiment(FilterMode::Filtered);
    let images = image_rows(&a.image_features)?;
    let features = build_features(&ds, &summaries(&a.data.run_dir)?, images.as_deref(), &config)?;
    let (model, log) = train(&ds, &features, &config.modality, &config.hyper)?;
    let out = a.out_dir();
    write_json(&out.join("model.json"), &model)?;
    write_json(&out.join("train_log.json"), &log)?;
    eprintln!(
        "trained {} epochs, loss {:.4} -> {:.4}; saved to {}",
        log.epoch_losses.len(),
        log.epoch_losses.first().copied().unwrap_or_default(),
        log.epoch_losses.last().copied().unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = &a.model_args;
    let ds = load_with_run(&m.data)?;
    let config = m.experiment(a.filter);
    let sums = summaries(&m.data.run_dir)?;
    let images = image_rows(&m.image_features)?;
    let out = m.out_dir();
    let report = match &a.model {
        None => {
            let outcome = run_experiment(&ds, &sums, images.as_deref(), &config)?;
            write_eval_dir(&out, &ds, &outcome).map_err(|e| anyhow!(e))?;
            outcome.report
        }
        Some(path) => {
            let model: Model = read_json(path).with_context(|| path.display().to_string())?;
            let config = ExperimentConfig { modality: model.setting.clone(), hyper: model.hyper.clone(), ..config };
            let features = build_features(&ds, &sums, images.as_deref(), &config)?;
            let test = id_triples(&ds, &ds.test);
            let (report, ranks) = evaluate(
                &model.embed(&features),
                &test,
                a.filter,
                &KnownTriples::from_dataset(&ds),
                Some(config.fingerprint()),
            )?;
            write_json(&out.join("metrics.json"), &report)?;
            write_jsonl(&out.join("ranks.jsonl"), &rank_rows(&ds, &ranks))?;
            report
        }
    };
    print_json(&report)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let file: AblateFile = read_json(&a.config).with_context(|| a.config.display().to_string())?;
    let data = DataRun { dataset: file.dataset.clone(), run_dir: file.run_dir.clone() };
    let ds = load_with_run(&data)?;
    let images = image_rows(&file.image_features)?;
    let rows = run_ablation(&ds, &summaries(&file.run_dir)?, images.as_deref(), &file.configs);
    let out = a.out.unwrap_or_else(|| file.run_dir.join("ablation.json"));
    write_json(&out, &rows)?;
    print_json(&rows)
}

fn subset_eval(a: SubsetArgs) -> Result<()> {
    let ds = load_with_run(&a.data)?;
    let wanted: HashSet<String> = fs::read_to_string(&a.entities)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| Qid::parse(l).map(|q| q.to_string()))
        .collect::<Result<_, _>>()?;
    let subset: HashSet<u32> = ds
        .entities
        .iter()
        .enumerate()
        .filter(|(_, e)| wanted.contains(e.qid.as_str()))
        .map(|(i, _)| i as u32)
        .collect();
    if subset.len() < wanted.len() {
        eprintln!("{} of {} listed QIDs are not in the dataset", wanted.len() - subset.len(), wanted.len());
    }
    let sums = summaries(&a.data.run_dir)?;
    let hyper = HyperParams { seed: a.seed, epochs: a.epochs, ..HyperParams::default() };
    let embed = |modality: &ModalitySetting| -> Result<_> {
        let config = ExperimentConfig {
            hyper: hyper.clone(),
            filter: a.filter,
            ..ExperimentConfig::new(modality.clone(), Some(a.variant))
        };
        let features = build_features(&ds, &sums, None, &config)?;
        let (model, _) = train(&ds, &features, modality, &config.hyper)?;
        Ok(model.embed(&features))
    };
    let baseline = embed(&a.baseline_modality)?;
    let enriched = embed(&a.enriched_modality)?;
    let test = id_triples(&ds, &ds.test);
    let report = subset_evaluate(&baseline, &enriched, &subset, &test, a.filter, &KnownTriples::from_dataset(&ds))?;
    if let Some(out) = a.out {
        write_json(&out, &report)?;
    }
    print_json(&report)
}

fn rank_delta(a: RankDeltaArgs) -> Result<()> {
    let read = |dir: &Path| -> Result<Vec<RankRow>> {
        let p = dir.join("ranks.jsonl");
        read_jsonl(&p).with_context(|| p.display().to_string())
    };
    let rows = rank_delta_report(&read(&a.baseline)?, &read(&a.enriched)?)?;
    if let Some(out) = &a.out {
        write_jsonl(out, &rows)?;
    }
    for r in rows.iter().take(a.top.unwrap_or(usize::MAX)) {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn audit(cmd: AuditCommand) -> Result<()> {
    match cmd {
        AuditCommand::Sample { data, n, seed, out } => {
            let ds = load_with_run(&data)?;
            let batch = sample_cases(&ds, &summaries(&data.run_dir)?, n, seed)?;
            let out = out.unwrap_or_else(|| data.run_dir.join("audit").join("batch.json"));
            write_json(&out, &batch)?;
            eprintln!("wrote {} cases to {}", batch.cases.len(), out.display());
            Ok(())
        }
        AuditCommand::Serve { port, batch, run_dir, log, ui, host } => {
            let parsed: AuditBatch = read_json(&batch).with_context(|| batch.display().to_string())?;
            let batch_dir = batch.parent().map(Path::to_path_buf).unwrap_or_default();
            let run_dir = run_dir.unwrap_or_else(|| batch_dir.parent().map(Path::to_path_buf).unwrap_or_default());
            let log = log.unwrap_or_else(|| batch_dir.join("verdicts.jsonl"));
            let store = AuditStore::open(parsed, &log)?;
            let app = router(AuditState::new(store, run_dir), ui.as_deref());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("audit service on http://{}", listener.local_addr()?);
                serve(listener, app).await
            })?;
            Ok(())
        }
    }
}

fn run(a: RunArgs, mock: bool) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => read_json::<RunConfig>(path).with_context(|| path.display().to_string())?,
        None => {
            let dataset = a.dataset.clone().ok_or_else(|| anyhow!("pass --config or --dataset"))?;
            let mut c = RunConfig::new(dataset, &a.run_dir);
            c.seed = a.seed;
            c.variant = a.variant;
            c.fusion_retries = a.retry;
            if !a.modality.is_empty() {
                c.modalities = a.modality.clone();
            }
            if let Some(e) = a.epochs {
                c.hyper.epochs = e;
            }
            if let Some(d) = a.delay_ms {
                c.politeness.delay_ms = d;
            }
            if let Some(p) = &a.page_url {
                c.fetcher = FetcherConfig::Http { page_url_template: p.clone() };
            }
            if !mock {
                c.caption_provider =
                    provider(false, a.provider_url.clone(), "captioner", "caption", CAPTION_URL_ENV, "--provider-url")?;
                c.llm_provider = provider(false, a.llm_url.clone(), "llm", "LLM", LLM_URL_ENV, "--llm-url")?;
            }
            c
        }
    };
    if mock {
        config = config.with_mocks();
    }
    let summary = run_pipeline(&config)?;
    print_json(&summary)
}
