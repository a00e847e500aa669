//! Detector abstraction and the line-delimited prediction wire format.
//!
//! Model inference lives outside this crate. A detector is anything that
//! turns a page image into scored, class-labeled [`NormBox`]es; the two
//! implementations here are a deterministic [`StubDetector`] and a
//! [`FileDetector`] that replays predictions written by an external worker.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::NormBox;

/// Minimum score a persisted prediction may carry.
pub const RETENTION_FLOOR: f64 = 0.05;

/// Minimum score for a crop to receive an embedding.
pub const EMBEDDING_FLOOR: f64 = 0.5;

/// The seven visual content classes, with their fixed integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "i64")]
pub enum ClassId {
    Photograph = 0,
    Illustration = 1,
    Map = 2,
    ComicsCartoon = 3,
    EditorialCartoon = 4,
    Headline = 5,
    Advertisement = 6,
}

impl ClassId {
    pub const ALL: [ClassId; 7] = [
        ClassId::Photograph,
        ClassId::Illustration,
        ClassId::Map,
        ClassId::ComicsCartoon,
        ClassId::EditorialCartoon,
        ClassId::Headline,
        ClassId::Advertisement,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<ClassId> {
        usize::try_from(code).ok().and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Photograph => "Photograph",
            ClassId::Illustration => "Illustration",
            ClassId::Map => "Map",
            ClassId::ComicsCartoon => "Comics/Cartoon",
            ClassId::EditorialCartoon => "Editorial Cartoon",
            ClassId::Headline => "Headline",
            ClassId::Advertisement => "Advertisement",
        }
    }

    /// Headlines are neither cropped nor embedded.
    pub fn is_cropped(self) -> bool {
        self != ClassId::Headline
    }
}

impl From<ClassId> for u8 {
    fn from(c: ClassId) -> u8 {
        c.code()
    }
}

impl TryFrom<i64> for ClassId {
    type Error = String;

    fn try_from(code: i64) -> Result<Self, Self::Error> {
        ClassId::from_code(code).ok_or_else(|| format!("class code {code} outside 0-6"))
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = String;

    /// Accepts the integer code, the display name, or a loose alias
    /// (case-insensitive, punctuation ignored: "comics", "editorial_cartoon", "ad").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(code) = s.trim().parse::<i64>() {
            return ClassId::try_from(code);
        }
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let class = match key.as_str() {
            "photograph" | "photo" | "photographs" | "photos" => ClassId::Photograph,
            "illustration" | "illustrations" => ClassId::Illustration,
            "map" | "maps" => ClassId::Map,
            "comicscartoon" | "comiccartoon" | "comics" | "comic" | "cartoon" => {
                ClassId::ComicsCartoon
            }
            "editorialcartoon" | "editorialcartoons" => ClassId::EditorialCartoon,
            "headline" | "headlines" => ClassId::Headline,
            "advertisement" | "advertisements" | "ad" | "ads" => ClassId::Advertisement,
            _ => return Err(format!("unknown class label {s:?}")),
        };
        Ok(class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub bbox: NormBox,
    pub score: f64,
    pub class_id: ClassId,
}

impl Prediction {
    pub fn new(bbox: NormBox, score: f64, class_id: ClassId) -> Self {
        Self {
            bbox,
            score,
            class_id,
        }
    }
}

/// Canonical prediction order: descending score, then class code, x1, y1 ascending.
pub fn canonical_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1().total_cmp(&b.bbox.x1()))
        .then(a.bbox.y1().total_cmp(&b.bbox.y1()))
}

/// Drops predictions under `floor` and sorts the rest canonically.
pub fn finalize_predictions(mut preds: Vec<Prediction>, floor: f64) -> Vec<Prediction> {
    preds.retain(|p| p.score >= floor);
    preds.sort_by(canonical_order);
    preds
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector unavailable: {0}")]
    Unavailable(String),
    #[error("no predictions recorded for page {0}")]
    MissingPage(String),
    #[error("detector failed on page {page}: {message}")]
    Failed { page: String, message: String },
}

/// Whether a detector may be called from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Concurrent,
    Serial,
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Returns predictions with scores at or above [`RETENTION_FLOOR`], in canonical order.
    fn detect(&self, page_id: &str, image: &DynamicImage) -> Result<Vec<Prediction>, DetectError>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

/// Deterministic detector whose output depends only on the page id.
#[derive(Debug, Clone, Default)]
pub struct StubDetector;

impl StubDetector {
    pub fn predictions_for(&self, page_id: &str) -> Vec<Prediction> {
        let digest = Sha256::digest(page_id.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);

        let n = rng.random_range(1..=8usize);
        let mut preds = Vec::with_capacity(n);
        while preds.len() < n {
            let w = rng.random_range(0.05..0.4);
            let h = rng.random_range(0.03..0.3);
            let x1 = rng.random_range(0.0..(1.0 - w));
            let y1 = rng.random_range(0.0..(1.0 - h));
            let class_id = ClassId::ALL[rng.random_range(0..ClassId::ALL.len())];
            let score = rng.random_range(RETENTION_FLOOR..=1.0);
            if let Ok(bbox) = NormBox::new(x1, y1, x1 + w, y1 + h) {
                preds.push(Prediction::new(bbox, score, class_id));
            }
        }
        finalize_predictions(preds, RETENTION_FLOOR)
    }
}

impl Detector for StubDetector {
    fn name(&self) -> &str {
        "stub"
    }

    fn detect(&self, page_id: &str, _image: &DynamicImage) -> Result<Vec<Prediction>, DetectError> {
        Ok(self.predictions_for(page_id))
    }
}

/// One line of the prediction wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub page_id: String,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub pred_classes: Vec<i64>,
}

impl WireRecord {
    pub fn from_predictions(page_id: &str, preds: &[Prediction]) -> Self {
        Self {
            page_id: page_id.to_string(),
            boxes: preds.iter().map(|p| p.bbox.to_array()).collect(),
            scores: preds.iter().map(|p| p.score).collect(),
            pred_classes: preds.iter().map(|p| i64::from(p.class_id.code())).collect(),
        }
    }

    /// Validates the record, dropping predictions under `floor`.
    ///
    /// Any structural problem rejects the whole record.
    pub fn into_predictions(self, floor: f64) -> Result<(String, Vec<Prediction>, usize), String> {
        let n = self.boxes.len();
        if self.scores.len() != n || self.pred_classes.len() != n {
            return Err(format!(
                "list lengths differ: boxes={}, scores={}, pred_classes={}",
                n,
                self.scores.len(),
                self.pred_classes.len()
            ));
        }
        let mut preds = Vec::with_capacity(n);
        let mut below_floor = 0;
        for ((b, &score), &code) in self.boxes.iter().zip(&self.scores).zip(&self.pred_classes) {
            let class_id = ClassId::from_code(code)
                .ok_or_else(|| format!("class code {code} outside 0-6"))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(format!("score {score} outside [0,1]"));
            }
            let bbox = NormBox::from_raw(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string())?;
            if score < floor {
                below_floor += 1;
                continue;
            }
            preds.push(Prediction::new(bbox, score, class_id));
        }
        Ok((self.page_id, preds, below_floor))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

/// Result of reading a prediction stream.
#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    pub by_page: BTreeMap<String, Vec<Prediction>>,
    pub rejected: Vec<LineDiagnostic>,
    pub below_floor: usize,
}

impl PredictionSet {
    pub fn total_predictions(&self) -> usize {
        self.by_page.values().map(Vec::len).sum()
    }
}

/// Reads line-delimited wire records, grouping predictions by page id.
pub fn read_predictions<R: BufRead>(reader: R) -> std::io::Result<PredictionSet> {
    read_predictions_with_floor(reader, RETENTION_FLOOR)
}

pub fn read_predictions_with_floor<R: BufRead>(
    reader: R,
    floor: f64,
) -> std::io::Result<PredictionSet> {
    let mut set = PredictionSet::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<WireRecord>(trimmed)
            .map_err(|e| e.to_string())
            .and_then(|rec| rec.into_predictions(floor));
        match parsed {
            Ok((page_id, preds, below)) => {
                set.below_floor += below;
                set.by_page.entry(page_id).or_default().extend(preds);
            }
            Err(message) => {
                log::warn!("prediction line {} rejected: {}", idx + 1, message);
                set.rejected.push(LineDiagnostic {
                    line: idx + 1,
                    message,
                });
            }
        }
    }
    for preds in set.by_page.values_mut() {
        preds.sort_by(canonical_order);
    }
    Ok(set)
}

pub fn write_prediction_line<W: Write>(
    mut writer: W,
    page_id: &str,
    preds: &[Prediction],
) -> std::io::Result<()> {
    let rec = WireRecord::from_predictions(page_id, preds);
    serde_json::to_writer(&mut writer, &rec)?;
    writer.write_all(b"\n")
}

/// Replays predictions produced elsewhere, keyed by page id.
#[derive(Debug, Clone, Default)]
pub struct FileDetector {
    by_page: BTreeMap<String, Vec<Prediction>>,
}

impl FileDetector {
    pub fn new(set: PredictionSet) -> Self {
        Self {
            by_page: set.by_page,
        }
    }

    pub fn from_reader<R: BufRead>(reader: R) -> std::io::Result<(Self, Vec<LineDiagnostic>)> {
        let set = read_predictions(reader)?;
        let rejected = set.rejected.clone();
        Ok((Self::new(set), rejected))
    }

    pub fn len(&self) -> usize {
        self.by_page.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_page.is_empty()
    }
}

impl Detector for FileDetector {
    fn name(&self) -> &str {
        "file"
    }

    fn detect(&self, page_id: &str, _image: &DynamicImage) -> Result<Vec<Prediction>, DetectError> {
        self.by_page
            .get(page_id)
            .cloned()
            .map(|p| finalize_predictions(p, RETENTION_FLOOR))
            .ok_or_else(|| DetectError::MissingPage(page_id.to_string()))
    }
}
