//! Command-line entry point.
//!
//! Human-readable output goes to standard error; each subcommand prints one
//! JSON summary to standard output. Exit codes: 0 success, 1 operational
//! failure, 2 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::analytics::{compute_stats_par, export_subset, SubsetFilter, DEFAULT_THRESHOLDS};
use crate::cocoset::{self, CocoDataset, ExportMapping};
use crate::detect::{read_predictions_with_floor, ClassId, Detector, FileDetector, StubDetector};
use crate::embedstore::{EmbeddingFamily, EmbeddingStore, Metric};
use crate::evalmap::{evaluate, ground_truth_from_coco, read_ground_truth_jsonl};
use crate::pipeline::{
    self, build_manifest, load_records, ContainmentPolicy, Embedder, Manifest, PipelineConfig,
    PixelGridEmbedder, Source,
};

pub const ENV_SOURCE_URL: &str = "NN_SOURCE_URL";
pub const ENV_WORKERS: &str = "NN_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "newsnav", version, about = "Extract, evaluate and query visual content from digitized newspaper pages")]
pub struct Cli {
    /// Increase log verbosity (repeatable); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build batch manifests.
    #[command(subcommand)]
    Manifest(ManifestCommand),
    /// Run the extraction pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Build and split COCO training sets.
    #[command(subcommand)]
    Coco(CocoCommand),
    /// Per-class AP, mAP and one-class AP of predictions against ground truth.
    Eval(EvalArgs),
    /// Threshold-cut counts, per-year averages and page coverage.
    Stats(StatsArgs),
    /// Package a filtered subset of crops with a metadata index.
    Export(ExportArgs),
    /// Nearest-neighbour search over crop embeddings.
    Similar(SimilarArgs),
}

#[derive(Debug, Subcommand)]
pub enum ManifestCommand {
    /// List every page image with a sibling OCR XML under <source>/<batch>.
    Build(ManifestBuildArgs),
}

#[derive(Debug, Args)]
pub struct ManifestBuildArgs {
    /// Local directory or HTTP base URL [env: NN_SOURCE_URL]
    #[arg(long)]
    pub source: Option<String>,
    /// Batch directory name under the source.
    #[arg(long)]
    pub batch: String,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Process every page of a manifest.
    Run(PipelineRunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorKind {
    /// Deterministic synthetic boxes seeded by page path.
    Stub,
    /// Replay a predictions file (--predictions).
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    /// Write no embedding files.
    None,
    /// Deterministic grayscale thumbnail vectors.
    PixelGrid,
}

#[derive(Debug, Args)]
pub struct PipelineRunArgs {
    /// Manifest of page paths, one per line (a failure manifest also works).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DetectorKind::Stub)]
    pub detector: DetectorKind,
    /// Line-delimited prediction records for --detector file.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EmbedderKind::PixelGrid)]
    pub embedder: EmbedderKind,
    /// TOML config with keys source, worker_count, downsample_factor, save_floor,
    /// embed_floor, containment_policy and jpeg_quality.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Local directory or HTTP base URL holding the pages [env: NN_SOURCE_URL] [default: .]
    #[arg(long)]
    pub source: Option<String>,
    /// Worker threads [env: NN_WORKERS] [default: available cores]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Integer image downsampling factor before detection [default: 6]
    #[arg(long)]
    pub downsample_factor: Option<u32>,
    /// Predictions scoring below this are dropped [default: 0.05]
    #[arg(long)]
    pub save_floor: Option<f64>,
    /// Crops scoring at or above this get embeddings [default: 0.5]
    #[arg(long)]
    pub embed_floor: Option<f64>,
    /// Which OCR words belong to a box: center, full or any-overlap [default: center]
    #[arg(long)]
    pub containment_policy: Option<ContainmentPolicy>,
    /// JPEG quality of saved crops [default: 90]
    #[arg(long)]
    pub jpeg_quality: Option<u8>,
}

#[derive(Debug, Subcommand)]
pub enum CocoCommand {
    /// Convert an annotation export (or a foreign COCO file) to the seven standard categories.
    Convert(CocoConvertArgs),
    /// Deterministic image-level train/validation split.
    Split(CocoSplitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// Raw region export read through the field mapping.
    Export,
    /// COCO file with its own category ids, matched by name.
    Coco,
}

#[derive(Debug, Args)]
pub struct CocoConvertArgs {
    /// Input JSON file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Export)]
    pub format: InputFormat,
    /// Field-mapping JSON [default: bundled v1 mapping]
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// JSON object of page key to [width, height] in pixels.
    #[arg(long)]
    pub dims: Option<PathBuf>,
    /// Directory of page images to read dimensions from.
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    /// COCO output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CocoSplitArgs {
    /// COCO input file.
    #[arg(long)]
    pub input: PathBuf,
    /// Fraction of images in the validation split.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub val_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Line-delimited prediction records.
    #[arg(long)]
    pub preds: PathBuf,
    /// Ground truth: COCO JSON, or line-delimited records when the name ends in .jsonl.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions scoring below this are ignored.
    #[arg(long, default_value_t = 0.05)]
    pub floor: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Directory of page records.
    #[arg(long)]
    pub records: PathBuf,
    /// Ascending score thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
    pub thresholds: Vec<f64>,
    /// CSV report (one row per year, class and threshold).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory of page records.
    #[arg(long)]
    pub records: PathBuf,
    /// Directory crop paths are relative to [default: --records]
    #[arg(long)]
    pub crops_root: Option<PathBuf>,
    /// First publication date, inclusive (YYYY-MM-DD).
    #[arg(long)]
    pub start: NaiveDate,
    /// Last publication date, inclusive (YYYY-MM-DD).
    #[arg(long)]
    pub end: NaiveDate,
    /// Comma-separated class names or codes [default: all]
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<ClassId>,
    /// Minimum prediction score, at least 0.05.
    #[arg(long, default_value_t = 0.9)]
    pub min_score: f64,
    /// Package directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimilarArgs {
    /// Directory of *_embeddings.json files.
    #[arg(long)]
    pub store: PathBuf,
    /// Crop path whose stored vector is the query.
    #[arg(long)]
    pub query_crop: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// r18 (512-d) or r50 (2,048-d).
    #[arg(long, default_value = "r50")]
    pub family: EmbeddingFamily,
    /// cosine or euclidean.
    #[arg(long, default_value = "cosine")]
    pub metric: Metric,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failed(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(cli.command) {
        Ok(summary) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<serde_json::Value, CliError> {
    match cmd {
        Command::Manifest(ManifestCommand::Build(a)) => manifest_build(a),
        Command::Pipeline(PipelineCommand::Run(a)) => pipeline_run(a),
        Command::Coco(CocoCommand::Convert(a)) => coco_convert(a),
        Command::Coco(CocoCommand::Split(a)) => coco_split(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Export(a) => export(a),
        Command::Similar(a) => similar(a),
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

fn resolve_source(flag: Option<&str>) -> Option<Source> {
    flag.map(str::to_string)
        .or_else(|| env_var(ENV_SOURCE_URL))
        .map(|s| Source::parse(&s))
}

fn manifest_build(a: ManifestBuildArgs) -> Result<serde_json::Value, CliError> {
    let source = resolve_source(a.source.as_deref())
        .ok_or_else(|| usage(format!("--source or {ENV_SOURCE_URL} required")))?;
    let (manifest, warnings) = build_manifest(&source, &a.batch)
        .with_context(|| format!("scanning {source}"))?;
    write_text(&a.out, &manifest.to_text())?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(json!({
        "batch": manifest.batch_name,
        "entries": manifest.len(),
        "warnings": warnings,
        "manifest": a.out,
    }))
}

/// Defaults, then the config file, then environment, then flags.
pub fn resolve_pipeline_config(a: &PipelineRunArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(path) => toml::from_str(&read_text(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = env_var(ENV_SOURCE_URL) {
        cfg.source = Source::parse(&s);
    }
    if let Some(w) = env_var(ENV_WORKERS) {
        cfg.worker_count = w
            .trim()
            .parse()
            .with_context(|| format!("{ENV_WORKERS}={w:?} is not a positive integer"))?;
    }
    if let Some(s) = &a.source {
        cfg.source = Source::parse(s);
    }
    if let Some(v) = a.workers {
        cfg.worker_count = v;
    }
    if let Some(v) = a.downsample_factor {
        cfg.downsample_factor = v;
    }
    if let Some(v) = a.save_floor {
        cfg.save_floor = v;
    }
    if let Some(v) = a.embed_floor {
        cfg.embed_floor = v;
    }
    if let Some(v) = a.containment_policy {
        cfg.containment_policy = v;
    }
    if let Some(v) = a.jpeg_quality {
        cfg.jpeg_quality = v;
    }
    Ok(cfg)
}

fn pipeline_run(a: PipelineRunArgs) -> Result<serde_json::Value, CliError> {
    let cfg = resolve_pipeline_config(&a).map_err(|e| usage(format!("{e:#}")))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let detector: Box<dyn Detector> = match (a.detector, &a.predictions) {
        (DetectorKind::Stub, None) => Box::new(StubDetector),
        (DetectorKind::File, Some(path)) => {
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let set = read_predictions_with_floor(BufReader::new(file), cfg.save_floor)
                .with_context(|| format!("reading {}", path.display()))?;
            for d in &set.rejected {
                eprintln!("warning: {}:{}: {}", path.display(), d.line, d.message);
            }
            Box::new(FileDetector::new(set))
        }
        (DetectorKind::Stub, Some(_)) => return Err(usage("--predictions requires --detector file")),
        (DetectorKind::File, None) => return Err(usage("--detector file requires --predictions")),
    };
    let embedder: Option<&dyn Embedder> = match a.embedder {
        EmbedderKind::None => None,
        EmbedderKind::PixelGrid => Some(&PixelGridEmbedder),
    };
    let default_batch = a
        .manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = Manifest::parse(&read_text(&a.manifest)?, &default_batch);
    let report = pipeline::run(&manifest, detector.as_ref(), embedder, &cfg, &a.out)
        .map_err(anyhow::Error::from)?;
    eprintln!(
        "{}: {} pages ok, {} failed",
        report.batch_name,
        report.success.len(),
        report.failures.len()
    );
    for f in &report.failures {
        eprintln!("  {} [{}] {}", f.entry, f.stage, f.message);
    }
    let mut summary = report.summary_json();
    summary["out"] = json!(a.out);
    summary["detector"] = json!(detector.name());
    Ok(summary)
}

fn coco_convert(a: CocoConvertArgs) -> Result<serde_json::Value, CliError> {
    let mapping = match &a.mapping {
        Some(p) => ExportMapping::from_json(&read_text(p)?).map_err(|e| usage(e.to_string()))?,
        None => ExportMapping::default(),
    };
    let text = read_text(&a.input)?;
    let conversion = match a.format {
        InputFormat::Coco => {
            let foreign = CocoDataset::from_json(&text).map_err(anyhow::Error::from)?;
            cocoset::normalize_categories(&foreign, &mapping.category_aliases).map_err(anyhow::Error::from)?
        }
        InputFormat::Export => {
            let raw: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
            let mut dims: BTreeMap<String, (u32, u32)> = BTreeMap::new();
            if let Some(p) = &a.dims {
                dims = serde_json::from_str(&read_text(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?;
            }
            if let Some(root) = &a.images_root {
                let pages = cocoset::export_pages(&raw, &mapping);
                let missing_pages: Vec<&str> = pages
                    .iter()
                    .map(String::as_str)
                    .filter(|p| !dims.contains_key(*p))
                    .collect();
                let (probed, missing) = cocoset::probe_dimensions(root, missing_pages);
                dims.extend(probed);
                for m in missing {
                    eprintln!("warning: {m}");
                }
            }
            cocoset::convert(&raw, &mapping, &dims).map_err(anyhow::Error::from)?
        }
    };
    write_text(&a.out, &conversion.dataset.to_json().map_err(anyhow::Error::from)?)?;
    for w in &conversion.warnings {
        eprintln!("warning: {w}");
    }
    let counts: BTreeMap<&str, usize> = ClassId::ALL
        .iter()
        .map(|c| (c.name(), conversion.counts.get(c).copied().unwrap_or(0)))
        .collect();
    Ok(json!({
        "images": conversion.dataset.images.len(),
        "annotations": conversion.dataset.annotations.len(),
        "counts": counts,
        "input_regions": conversion.input_regions,
        "rejected": conversion.rejections.len(),
        "warnings": conversion.warnings.len(),
        "out": a.out,
    }))
}

fn coco_split(a: CocoSplitArgs) -> Result<serde_json::Value, CliError> {
    let ds = CocoDataset::from_json(&read_text(&a.input)?).map_err(anyhow::Error::from)?;
    let (train, val) = cocoset::split(&ds, a.val_fraction, a.seed).map_err(|e| match e {
        cocoset::CocoError::BadFraction(_) => usage(e.to_string()),
        other => CliError::Failed(other.into()),
    })?;
    write_text(&a.train_out, &train.to_json().map_err(anyhow::Error::from)?)?;
    write_text(&a.val_out, &val.to_json().map_err(anyhow::Error::from)?)?;
    Ok(json!({
        "train": {"images": train.images.len(), "annotations": train.annotations.len(), "out": a.train_out},
        "val": {"images": val.images.len(), "annotations": val.annotations.len(), "out": a.val_out},
        "seed": a.seed,
    }))
}

fn eval(a: EvalArgs) -> Result<serde_json::Value, CliError> {
    if !(0.0..=1.0).contains(&a.floor) {
        return Err(usage(format!("--floor {} outside [0, 1]", a.floor)));
    }
    let file = fs::File::open(&a.preds).with_context(|| format!("opening {}", a.preds.display()))?;
    let preds = read_predictions_with_floor(BufReader::new(file), a.floor)
        .with_context(|| format!("reading {}", a.preds.display()))?;
    for d in &preds.rejected {
        eprintln!("warning: {}:{}: {}", a.preds.display(), d.line, d.message);
    }
    let gts = if a.gt.extension().is_some_and(|e| e == "jsonl") {
        let file = fs::File::open(&a.gt).with_context(|| format!("opening {}", a.gt.display()))?;
        let (gts, rejected) = read_ground_truth_jsonl(BufReader::new(file))
            .with_context(|| format!("reading {}", a.gt.display()))?;
        for d in rejected {
            eprintln!("warning: {}:{}: {}", a.gt.display(), d.line, d.message);
        }
        gts
    } else {
        let ds = CocoDataset::from_json(&read_text(&a.gt)?).map_err(anyhow::Error::from)?;
        let (gts, problems) = ground_truth_from_coco(&ds);
        for p in problems {
            eprintln!("warning: {p}");
        }
        gts
    };
    let result = evaluate(&preds.by_page, &gts).map_err(anyhow::Error::from)?;
    eprint!("{}", result.to_table());
    eprintln!("mAP {:.4}", result.map_value);
    let mut summary = result.to_json();
    summary["pages_with_predictions"] = json!(preds.by_page.len());
    summary["predictions"] = json!(preds.total_predictions());
    summary["ground_truth"] = json!(gts.len());
    Ok(summary)
}

fn stats(a: StatsArgs) -> Result<serde_json::Value, CliError> {
    crate::analytics::validate_thresholds(&a.thresholds).map_err(|e| usage(e.to_string()))?;
    let (records, problems) = load_records(&a.records).map_err(anyhow::Error::from)?;
    for p in &problems {
        eprintln!("warning: {p}");
    }
    let report = compute_stats_par(&records, &a.thresholds).map_err(anyhow::Error::from)?;
    if let Some(path) = &a.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(anyhow::Error::from)?;
        write_text(path, &String::from_utf8(buf).expect("csv is utf-8"))?;
    }
    let report_json = report.to_json();
    if let Some(path) = &a.json {
        write_text(path, &serde_json::to_string_pretty(&report_json).expect("serializes"))?;
    }
    let totals: BTreeMap<String, u64> = report
        .thresholds
        .iter()
        .map(|t| (t.to_string(), report.total(*t).unwrap_or(0)))
        .collect();
    Ok(json!({
        "records": records.len(),
        "unreadable_files": problems.len(),
        "skipped_records": report.skipped_records,
        "thresholds": report.thresholds,
        "counts": report.counts,
        "totals": totals,
        "pages_per_year": report.pages_per_year,
    }))
}

fn export(a: ExportArgs) -> Result<serde_json::Value, CliError> {
    let classes: BTreeSet<ClassId> = if a.classes.is_empty() {
        ClassId::ALL.into_iter().collect()
    } else {
        a.classes.iter().copied().collect()
    };
    let filter = SubsetFilter::new(a.start, a.end, classes, a.min_score).map_err(|e| usage(e.to_string()))?;
    let (records, problems) = load_records(&a.records).map_err(anyhow::Error::from)?;
    for p in &problems {
        eprintln!("warning: {p}");
    }
    let crops_root = a.crops_root.as_deref().unwrap_or(&a.records);
    let report = export_subset(&records, crops_root, &filter, &a.out).map_err(anyhow::Error::from)?;
    for g in &report.gaps {
        eprintln!("warning: missing crop {g}");
    }
    Ok(json!({
        "exported": report.exported,
        "crops_copied": report.crops_copied,
        "gaps": report.gaps.len(),
        "out": a.out,
    }))
}

fn similar(a: SimilarArgs) -> Result<serde_json::Value, CliError> {
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let (store, diagnostics) = EmbeddingStore::load_dir(&a.store, a.family).map_err(anyhow::Error::from)?;
    for d in &diagnostics {
        eprintln!("warning: {}: {}", d.filepath, d.message);
    }
    let id = store
        .find_crop(&a.query_crop)
        .ok_or_else(|| anyhow!("crop {:?} not found in store ({} vectors)", a.query_crop, store.len()))?;
    if a.metric == Metric::Cosine && store.is_zero(id) {
        return Err(anyhow!("crop {:?} has a zero vector; cosine similarity is undefined", a.query_crop).into());
    }
    let result = store
        .query_topk(store.vector(id), a.k, a.metric)
        .map_err(anyhow::Error::from)?;
    for (rank, h) in result.hits.iter().enumerate() {
        eprintln!("{:>3}. {:+.6} {}", rank + 1, h.similarity, h.filepath);
    }
    Ok(json!({
        "query": store.filepath(id),
        "metric": a.metric.to_string(),
        "family": a.family.to_string(),
        "store_size": store.len(),
        "hits": result.hits,
    }))
}
