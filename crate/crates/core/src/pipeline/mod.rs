//! Page-level extraction pipeline.
//!
//! For each manifest entry: fetch the page image and its OCR XML, downsample
//! the image, run the detector, collect the OCR words inside every predicted
//! box, crop non-headline boxes to JPEG, optionally embed crops at or above
//! the embedding floor, and write the page record. Pages are independent; a
//! failure at any stage routes the entry to the failure manifest and leaves
//! no output files for that page.

pub mod embed;
pub mod imaging;
pub mod ocr;
pub mod pubdate;
pub mod source;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::DynamicImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alto::parse_alto;
use crate::detect::{
    finalize_predictions, ClassId, Concurrency, Detector, Prediction, EMBEDDING_FLOOR,
    RETENTION_FLOOR,
};
use crate::embedstore::{EmbeddingRecord, EMBEDDINGS_SUFFIX};
use crate::geometry::NormBox;

pub use embed::{CropEmbedding, Embedder, PixelGridEmbedder};
pub use ocr::{extract_ocr_in_box, ContainmentPolicy};
pub use pubdate::parse_pub_date;
pub use source::{build_manifest, ocr_path_for, Manifest, Source};

pub const DEFAULT_DOWNSAMPLE_FACTOR: u32 = 6;
pub const DEFAULT_JPEG_QUALITY: u8 = 90;
pub const SUCCESS_MANIFEST: &str = "success_manifest.txt";
pub const FAILURE_MANIFEST: &str = "failure_manifest.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Per-page output schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub filepath: String,
    pub pub_date: String,
    pub boxes: Vec<NormBox>,
    pub scores: Vec<f64>,
    pub pred_classes: Vec<ClassId>,
    /// Words inside each box, in reading order.
    pub ocr: Vec<Vec<String>>,
    /// One crop path per non-headline prediction, in prediction order.
    pub visual_content_filepaths: Vec<String>,
}

impl PageRecord {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        self.boxes
            .iter()
            .zip(&self.scores)
            .zip(&self.pred_classes)
            .map(|((b, s), c)| Prediction::new(*b, *s, *c))
            .collect()
    }

    /// Crop path for each prediction (`None` for headlines).
    pub fn crop_paths(&self) -> Vec<Option<&str>> {
        let mut crops = self.visual_content_filepaths.iter();
        self.pred_classes
            .iter()
            .map(|c| if c.is_cropped() { crops.next().map(String::as_str) } else { None })
            .collect()
    }

    /// Structural invariants; returns the problems found.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let n = self.boxes.len();
        if self.scores.len() != n || self.pred_classes.len() != n || self.ocr.len() != n {
            problems.push(format!(
                "list lengths differ: boxes={n}, scores={}, pred_classes={}, ocr={}",
                self.scores.len(),
                self.pred_classes.len(),
                self.ocr.len()
            ));
        }
        if let Some(s) = self.scores.iter().find(|s| **s < RETENTION_FLOOR || **s > 1.0) {
            problems.push(format!("score {s} outside [{RETENTION_FLOOR}, 1]"));
        }
        let cropped = self.pred_classes.iter().filter(|c| c.is_cropped()).count();
        if self.visual_content_filepaths.len() != cropped {
            problems.push(format!(
                "{} crop paths for {cropped} non-headline predictions",
                self.visual_content_filepaths.len()
            ));
        }
        if pubdate::year_of(&self.pub_date).is_none() {
            problems.push(format!("pub_date {:?} is not YYYY-MM-DD", self.pub_date));
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub downsample_factor: u32,
    pub save_floor: f64,
    pub embed_floor: f64,
    pub containment_policy: ContainmentPolicy,
    pub worker_count: usize,
    pub source: Source,
    pub jpeg_quality: u8,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            downsample_factor: DEFAULT_DOWNSAMPLE_FACTOR,
            save_floor: RETENTION_FLOOR,
            embed_floor: EMBEDDING_FLOOR,
            containment_policy: ContainmentPolicy::Center,
            worker_count: std::thread::available_parallelism().map_or(1, |n| n.get()),
            source: Source::Local(PathBuf::from(".")),
            jpeg_quality: DEFAULT_JPEG_QUALITY,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.downsample_factor == 0 {
            return fail("downsample_factor must be positive".into());
        }
        if self.worker_count == 0 {
            return fail("worker_count must be positive".into());
        }
        if !(RETENTION_FLOOR <= self.save_floor
            && self.save_floor <= self.embed_floor
            && self.embed_floor <= 1.0)
        {
            return fail(format!(
                "floors must satisfy {RETENTION_FLOOR} <= save_floor ({}) <= embed_floor ({}) <= 1",
                self.save_floor, self.embed_floor
            ));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return fail(format!("jpeg_quality {} outside 1-100", self.jpeg_quality));
        }
        Ok(())
    }
}

/// Pipeline stage at which a page failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Metadata,
    Fetch,
    Decode,
    Ocr,
    Detect,
    Crop,
    Embed,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Metadata => "metadata",
            Stage::Fetch => "fetch",
            Stage::Decode => "decode",
            Stage::Ocr => "ocr",
            Stage::Detect => "detect",
            Stage::Crop => "crop",
            Stage::Embed => "embed",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FailureEntry {
    pub entry: String,
    pub stage: Stage,
    pub message: String,
}

impl FailureEntry {
    fn new(entry: &str, stage: Stage, message: impl ToString) -> Self {
        Self {
            entry: entry.to_string(),
            stage,
            message: message.to_string(),
        }
    }

    pub fn to_line(&self) -> String {
        let message: String = self
            .message
            .chars()
            .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("{}\t{}\t{}", self.entry, self.stage, message)
    }
}

/// Everything one page produces, held in memory until it is written.
#[derive(Debug, Clone)]
pub struct PageOutput {
    pub record: PageRecord,
    /// `(relative path, JPEG bytes)`.
    pub crops: Vec<(String, Vec<u8>)>,
    pub embeddings: Option<EmbeddingRecord>,
}

fn entry_stem(entry: &str) -> &str {
    match entry.rsplit_once('.') {
        Some((stem, ext)) if !ext.contains('/') => stem,
        _ => entry,
    }
}

pub fn record_path_for(entry: &str) -> String {
    format!("{}.json", entry_stem(entry))
}

pub fn embeddings_path_for(entry: &str) -> String {
    format!("{}{EMBEDDINGS_SUFFIX}.json", entry_stem(entry))
}

pub fn crop_path_for(entry: &str, prediction_index: usize) -> String {
    format!("{}_{prediction_index:03}.jpg", entry_stem(entry))
}

/// Shared, read-only state for processing pages.
pub struct PageContext<'a> {
    pub config: &'a PipelineConfig,
    pub detector: &'a dyn Detector,
    pub embedder: Option<&'a dyn Embedder>,
    serial_detect: Option<Mutex<()>>,
}

impl<'a> PageContext<'a> {
    pub fn new(
        config: &'a PipelineConfig,
        detector: &'a dyn Detector,
        embedder: Option<&'a dyn Embedder>,
    ) -> Self {
        let serial_detect = (detector.concurrency() == Concurrency::Serial).then(|| Mutex::new(()));
        Self {
            config,
            detector,
            embedder,
            serial_detect,
        }
    }

    fn detect(&self, entry: &str, image: &DynamicImage) -> Result<Vec<Prediction>, String> {
        let _guard = self
            .serial_detect
            .as_ref()
            .map(|m| m.lock().unwrap_or_else(|p| p.into_inner()));
        self.detector
            .detect(entry, image)
            .map_err(|e| e.to_string())
    }
}

/// Runs every stage for one page, without touching the filesystem.
pub fn process_page(entry: &str, ctx: &PageContext<'_>) -> Result<PageOutput, FailureEntry> {
    let cfg = ctx.config;
    let fail = |stage, msg: String| FailureEntry::new(entry, stage, msg);

    let pub_date = parse_pub_date(entry).map_err(|m| fail(Stage::Metadata, m))?;
    let image_bytes = cfg
        .source
        .fetch(entry)
        .map_err(|e| fail(Stage::Fetch, e.to_string()))?;
    let xml_bytes = cfg
        .source
        .fetch(&ocr_path_for(entry))
        .map_err(|e| fail(Stage::Fetch, e.to_string()))?;

    let full = image::load_from_memory(&image_bytes).map_err(|e| fail(Stage::Decode, e.to_string()))?;
    let (full_w, full_h) = (full.width(), full.height());
    let small = imaging::downsample(&full, cfg.downsample_factor);
    drop(full);

    let alto = parse_alto(&xml_bytes, full_w, full_h).map_err(|e| fail(Stage::Ocr, e.to_string()))?;

    let preds = ctx
        .detect(entry, &small)
        .map_err(|m| fail(Stage::Detect, m))?;
    let preds = finalize_predictions(preds, cfg.save_floor.max(RETENTION_FLOOR));

    let ocr = preds
        .iter()
        .map(|p| extract_ocr_in_box(&alto, &p.bbox, cfg.containment_policy))
        .collect();

    let mut crops = Vec::new();
    let mut crop_paths = Vec::new();
    let mut embedded: Vec<(String, CropEmbedding)> = Vec::new();
    for (i, p) in preds.iter().enumerate().filter(|(_, p)| p.class_id.is_cropped()) {
        let img = imaging::crop(&small, &p.bbox)
            .ok_or_else(|| fail(Stage::Crop, "downsampled image is empty".into()))?;
        let bytes = imaging::encode_jpeg(&img, cfg.jpeg_quality)
            .map_err(|e| fail(Stage::Crop, e.to_string()))?;
        let path = crop_path_for(entry, i);
        if let Some(embedder) = ctx.embedder {
            if p.score >= cfg.embed_floor {
                let v = embedder.embed(&img).map_err(|m| fail(Stage::Embed, m))?;
                embedded.push((path.clone(), v));
            }
        }
        crops.push((path.clone(), bytes));
        crop_paths.push(path);
    }

    let embeddings = ctx.embedder.map(|_| EmbeddingRecord {
        filepath: entry.to_string(),
        resnet_50_embeddings: embedded.iter().map(|(_, e)| e.resnet_50.clone()).collect(),
        resnet_18_embeddings: embedded.iter().map(|(_, e)| e.resnet_18.clone()).collect(),
        visual_content_filepaths: embedded.into_iter().map(|(p, _)| p).collect(),
    });

    let record = PageRecord {
        filepath: entry.to_string(),
        pub_date,
        boxes: preds.iter().map(|p| p.bbox).collect(),
        scores: preds.iter().map(|p| p.score).collect(),
        pred_classes: preds.iter().map(|p| p.class_id).collect(),
        ocr,
        visual_content_filepaths: crop_paths,
    };
    Ok(PageOutput {
        record,
        crops,
        embeddings,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let res = fs::write(&partial, bytes).and_then(|_| fs::rename(&partial, path));
    if res.is_err() {
        let _ = fs::remove_file(&partial);
    }
    res
}

/// Writes a page's files under `out_dir`, record last. On error, files
/// already written for the page are removed.
pub fn write_page_output(out_dir: &Path, output: &PageOutput) -> Result<(), FailureEntry> {
    let entry = &output.record.filepath;
    let mut files: Vec<(String, Vec<u8>)> = output.crops.clone();
    let json = |v: serde_json::Result<Vec<u8>>| v.map_err(|e| FailureEntry::new(entry, Stage::Write, e));
    if let Some(emb) = &output.embeddings {
        files.push((embeddings_path_for(entry), json(serde_json::to_vec(emb))?));
    }
    files.push((record_path_for(entry), json(serde_json::to_vec(&output.record))?));

    let mut written = Vec::new();
    for (rel, bytes) in &files {
        let path = out_dir.join(rel);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(FailureEntry::new(entry, Stage::Write, format!("{}: {e}", path.display())));
        }
        written.push(path);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub batch_name: String,
    pub success: Vec<String>,
    pub failures: Vec<FailureEntry>,
    pub predictions: usize,
    pub crops: usize,
    pub embeddings: usize,
}

impl RunReport {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "batch": self.batch_name,
            "pages": self.success.len() + self.failures.len(),
            "success": self.success.len(),
            "failure": self.failures.len(),
            "predictions": self.predictions,
            "crops": self.crops,
            "embeddings": self.embeddings,
        })
    }
}

struct PageStats {
    predictions: usize,
    crops: usize,
    embeddings: usize,
}

/// Processes every manifest entry on a pool of `config.worker_count`
/// threads, then writes the success and failure manifests to `out_dir`.
pub fn run(
    manifest: &Manifest,
    detector: &dyn Detector,
    embedder: Option<&dyn Embedder>,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let ctx = PageContext::new(config, detector, embedder);

    let results: Vec<Result<PageStats, FailureEntry>> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|entry| {
                let out = process_page(entry, &ctx)?;
                write_page_output(out_dir, &out)?;
                Ok(PageStats {
                    predictions: out.record.len(),
                    crops: out.crops.len(),
                    embeddings: out.embeddings.map_or(0, |e| e.visual_content_filepaths.len()),
                })
            })
            .collect()
    });

    let mut report = RunReport {
        batch_name: manifest.batch_name.clone(),
        success: Vec::new(),
        failures: Vec::new(),
        predictions: 0,
        crops: 0,
        embeddings: 0,
    };
    for (entry, res) in manifest.entries.iter().zip(results) {
        match res {
            Ok(stats) => {
                report.success.push(entry.clone());
                report.predictions += stats.predictions;
                report.crops += stats.crops;
                report.embeddings += stats.embeddings;
            }
            Err(f) => {
                log::warn!("{}: failed at {}: {}", f.entry, f.stage, f.message);
                report.failures.push(f);
            }
        }
    }

    let success = Manifest {
        batch_name: manifest.batch_name.clone(),
        entries: report.success.clone(),
    };
    let mut failure_text = format!("# batch: {}\n", manifest.batch_name);
    for f in &report.failures {
        failure_text.push_str(&f.to_line());
        failure_text.push('\n');
    }
    for (name, text) in [(SUCCESS_MANIFEST, success.to_text()), (FAILURE_MANIFEST, failure_text)] {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes()).map_err(|source| PipelineError::Io { path, source })?;
    }
    Ok(report)
}

/// Loads every page record (`*.json`, excluding embedding files) under `dir`
/// in sorted path order.
pub fn load_records(dir: &Path) -> Result<(Vec<PageRecord>, Vec<String>), PipelineError> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        let name = entry.file_name().to_string_lossy();
        if !entry.file_type().is_file()
            || !name.ends_with(".json")
            || name.ends_with(&format!("{EMBEDDINGS_SUFFIX}.json"))
        {
            continue;
        }
        let path = entry.path();
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        match serde_json::from_str::<PageRecord>(&text) {
            Ok(r) => records.push(r),
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    Ok((records, problems))
}
