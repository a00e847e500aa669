//! Corpus statistics over page records and filtered subset export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;
use thiserror::Error;

use crate::detect::{ClassId, RETENTION_FLOOR};
use crate::geometry::{union_area, NormBox};
use crate::pipeline::pubdate::year_of;
use crate::pipeline::PageRecord;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
pub const STATS_CSV_HEADER: [&str; 8] = [
    "year",
    "class_id",
    "class_name",
    "threshold",
    "pages",
    "count",
    "avg_per_page",
    "coverage",
];
pub const INDEX_CSV_HEADER: [&str; 11] = [
    "crop", "filepath", "pub_date", "x1", "y1", "x2", "y2", "score", "class_id", "class_name", "ocr",
];

// Per-page coverage is summed in fixed point so that merging partial
// accumulators in any order gives bit-identical results.
const COVERAGE_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error("invalid filter: {0}")]
    Filter(String),
    #[error("cannot merge accumulators with different thresholds")]
    ThresholdMismatch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalyticsError + '_ {
    move |source| AnalyticsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<(), AnalyticsError> {
    if thresholds.is_empty() {
        return Err(AnalyticsError::Thresholds("at least one threshold required".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(AnalyticsError::Thresholds(format!("{t} outside [0, 1]")));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalyticsError::Thresholds(format!(
            "{thresholds:?} not strictly ascending"
        )));
    }
    Ok(())
}

/// Mergeable partial statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    thresholds: Vec<f64>,
    counts: BTreeMap<ClassId, Vec<u64>>,
    yearly_counts: BTreeMap<(i32, ClassId), Vec<u64>>,
    yearly_coverage: BTreeMap<(i32, ClassId), Vec<u128>>,
    pages_per_year: BTreeMap<i32, u64>,
    skipped: u64,
}

impl StatsAccumulator {
    pub fn new(thresholds: &[f64]) -> Result<Self, AnalyticsError> {
        validate_thresholds(thresholds)?;
        let n = thresholds.len();
        Ok(Self {
            thresholds: thresholds.to_vec(),
            counts: ClassId::ALL.iter().map(|c| (*c, vec![0; n])).collect(),
            yearly_counts: BTreeMap::new(),
            yearly_coverage: BTreeMap::new(),
            pages_per_year: BTreeMap::new(),
            skipped: 0,
        })
    }

    pub fn add(&mut self, record: &PageRecord) {
        let Some(year) = year_of(&record.pub_date) else {
            log::warn!("{}: unparseable pub_date {:?}, skipped", record.filepath, record.pub_date);
            self.skipped += 1;
            return;
        };
        let n = record.boxes.len();
        if record.scores.len() != n || record.pred_classes.len() != n {
            log::warn!("{}: misaligned prediction lists, skipped", record.filepath);
            self.skipped += 1;
            return;
        }
        let nt = self.thresholds.len();
        *self.pages_per_year.entry(year).or_default() += 1;
        for class in ClassId::ALL {
            let yc = self.yearly_counts.entry((year, class)).or_insert_with(|| vec![0; nt]);
            let mut prev_cov = u128::MAX;
            for (ti, &t) in self.thresholds.iter().enumerate() {
                let boxes: Vec<NormBox> = (0..n)
                    .filter(|&i| record.pred_classes[i] == class && record.scores[i] >= t)
                    .map(|i| record.boxes[i])
                    .collect();
                let k = boxes.len() as u64;
                self.counts.get_mut(&class).expect("all classes present")[ti] += k;
                yc[ti] += k;
                // A higher threshold keeps a subset of the boxes; clamping
                // removes rounding noise that could break that ordering.
                let cov = ((union_area(&boxes).clamp(0.0, 1.0) * COVERAGE_SCALE).round() as u128).min(prev_cov);
                prev_cov = cov;
                self.yearly_coverage.entry((year, class)).or_insert_with(|| vec![0; nt])[ti] += cov;
            }
        }
    }

    pub fn merge(&mut self, other: StatsAccumulator) -> Result<(), AnalyticsError> {
        if self.thresholds != other.thresholds {
            return Err(AnalyticsError::ThresholdMismatch);
        }
        fn add_into<V: Copy + std::ops::AddAssign, K: Ord>(a: &mut BTreeMap<K, Vec<V>>, b: BTreeMap<K, Vec<V>>) {
            for (k, vb) in b {
                match a.get_mut(&k) {
                    Some(va) => va.iter_mut().zip(vb).for_each(|(x, y)| *x += y),
                    None => {
                        a.insert(k, vb);
                    }
                }
            }
        }
        add_into(&mut self.counts, other.counts);
        add_into(&mut self.yearly_counts, other.yearly_counts);
        add_into(&mut self.yearly_coverage, other.yearly_coverage);
        for (y, p) in other.pages_per_year {
            *self.pages_per_year.entry(y).or_default() += p;
        }
        self.skipped += other.skipped;
        Ok(())
    }

    pub fn finish(self) -> StatsReport {
        let mut yearly = Vec::new();
        for (&(year, class), counts) in &self.yearly_counts {
            let pages = self.pages_per_year[&year];
            let cov = &self.yearly_coverage[&(year, class)];
            for (ti, &threshold) in self.thresholds.iter().enumerate() {
                yearly.push(YearlyRow {
                    year,
                    class_id: class,
                    class_name: class.name(),
                    threshold,
                    pages,
                    count: counts[ti],
                    avg_per_page: counts[ti] as f64 / pages as f64,
                    coverage: (cov[ti] as f64 / COVERAGE_SCALE / pages as f64).clamp(0.0, 1.0),
                });
            }
        }
        StatsReport {
            thresholds: self.thresholds,
            counts: self
                .counts
                .into_iter()
                .map(|(c, v)| (c.name().to_string(), v))
                .collect(),
            pages_per_year: self.pages_per_year,
            yearly,
            skipped_records: self.skipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YearlyRow {
    pub year: i32,
    pub class_id: ClassId,
    pub class_name: &'static str,
    pub threshold: f64,
    pub pages: u64,
    pub count: u64,
    pub avg_per_page: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub thresholds: Vec<f64>,
    /// Class name to counts, aligned with `thresholds`.
    pub counts: BTreeMap<String, Vec<u64>>,
    pub pages_per_year: BTreeMap<i32, u64>,
    /// One row per (year, class, threshold), sorted by that key.
    pub yearly: Vec<YearlyRow>,
    pub skipped_records: u64,
}

impl StatsReport {
    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.thresholds.iter().position(|x| *x == t)
    }

    pub fn count(&self, class: ClassId, threshold: f64) -> Option<u64> {
        let ti = self.threshold_index(threshold)?;
        self.counts.get(class.name()).map(|v| v[ti])
    }

    pub fn total(&self, threshold: f64) -> Option<u64> {
        let ti = self.threshold_index(threshold)?;
        Some(self.counts.values().map(|v| v[ti]).sum())
    }

    fn row(&self, year: i32, class: ClassId, threshold: f64) -> Option<&YearlyRow> {
        self.yearly
            .iter()
            .find(|r| r.year == year && r.class_id == class && r.threshold == threshold)
    }

    pub fn yearly_avg_per_page(&self, year: i32, class: ClassId, threshold: f64) -> Option<f64> {
        self.row(year, class, threshold).map(|r| r.avg_per_page)
    }

    pub fn yearly_coverage(&self, year: i32, class: ClassId, threshold: f64) -> Option<f64> {
        self.row(year, class, threshold).map(|r| r.coverage)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AnalyticsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(STATS_CSV_HEADER)?;
        for r in &self.yearly {
            out.write_record([
                r.year.to_string(),
                r.class_id.code().to_string(),
                r.class_name.to_string(),
                r.threshold.to_string(),
                r.pages.to_string(),
                r.count.to_string(),
                r.avg_per_page.to_string(),
                r.coverage.to_string(),
            ])?;
        }
        out.flush().map_err(|e| AnalyticsError::Csv(e.into()))?;
        Ok(())
    }
}

/// Sequential fold; equivalent to any sharded fold followed by merges.
pub fn compute_stats<'a, I>(records: I, thresholds: &[f64]) -> Result<StatsReport, AnalyticsError>
where
    I: IntoIterator<Item = &'a PageRecord>,
{
    let mut acc = StatsAccumulator::new(thresholds)?;
    for r in records {
        acc.add(r);
    }
    Ok(acc.finish())
}

/// Parallel fold over a slice of records.
pub fn compute_stats_par(records: &[PageRecord], thresholds: &[f64]) -> Result<StatsReport, AnalyticsError> {
    use rayon::prelude::*;
    let empty = StatsAccumulator::new(thresholds)?;
    let acc = records
        .par_iter()
        .fold(
            || empty.clone(),
            |mut acc, r| {
                acc.add(r);
                acc
            },
        )
        .reduce(
            || empty.clone(),
            |mut a, b| {
                a.merge(b).expect("same thresholds");
                a
            },
        );
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetFilter {
    start: NaiveDate,
    end: NaiveDate,
    classes: BTreeSet<ClassId>,
    min_score: f64,
}

impl SubsetFilter {
    pub fn new(
        start: NaiveDate,
        end: NaiveDate,
        classes: BTreeSet<ClassId>,
        min_score: f64,
    ) -> Result<Self, AnalyticsError> {
        if start > end {
            return Err(AnalyticsError::Filter(format!("start {start} after end {end}")));
        }
        if !(RETENTION_FLOOR..=1.0).contains(&min_score) {
            return Err(AnalyticsError::Filter(format!(
                "min_score {min_score} outside [{RETENTION_FLOOR}, 1]"
            )));
        }
        Ok(Self {
            start,
            end,
            classes,
            min_score,
        })
    }

    pub fn admits_date(&self, pub_date: &str) -> bool {
        NaiveDate::parse_from_str(pub_date, "%Y-%m-%d")
            .map(|d| self.start <= d && d <= self.end)
            .unwrap_or(false)
    }

    pub fn admits(&self, class: ClassId, score: f64) -> bool {
        self.classes.contains(&class) && score >= self.min_score
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubsetReport {
    /// Predictions listed in the index.
    pub exported: usize,
    /// Crops copied into the package.
    pub crops_copied: usize,
    /// Crops referenced by a record but missing under the crops root.
    pub gaps: Vec<String>,
}

/// Writes a subset package to `dest`: matching crops (same relative paths),
/// `index.csv`, `manifest.txt` listing the copied crops, and `gaps.txt`.
pub fn export_subset(
    records: &[PageRecord],
    crops_root: &Path,
    filter: &SubsetFilter,
    dest: &Path,
) -> Result<SubsetReport, AnalyticsError> {
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let mut sorted: Vec<&PageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.filepath.cmp(&b.filepath));

    let index_path = dest.join("index.csv");
    let mut index = csv::Writer::from_path(&index_path)?;
    index.write_record(INDEX_CSV_HEADER)?;
    let mut report = SubsetReport {
        exported: 0,
        crops_copied: 0,
        gaps: Vec::new(),
    };
    let mut manifest = String::new();
    for rec in sorted.into_iter().filter(|r| filter.admits_date(&r.pub_date)) {
        if rec.pred_classes.len() != rec.boxes.len() || rec.scores.len() != rec.boxes.len() {
            log::warn!("{}: misaligned prediction lists, skipped", rec.filepath);
            continue;
        }
        let crops = rec.crop_paths();
        for i in 0..rec.boxes.len() {
            let (class, score) = (rec.pred_classes[i], rec.scores[i]);
            if !filter.admits(class, score) {
                continue;
            }
            let crop = crops[i].unwrap_or("");
            if !crop.is_empty() {
                let src = crops_root.join(crop);
                let dst = dest.join(crop);
                if src.is_file() {
                    if let Some(parent) = dst.parent() {
                        fs::create_dir_all(parent).map_err(io_err(parent))?;
                    }
                    fs::copy(&src, &dst).map_err(io_err(&dst))?;
                    report.crops_copied += 1;
                    manifest.push_str(crop);
                    manifest.push('\n');
                } else {
                    report.gaps.push(crop.to_string());
                }
            }
            let b = rec.boxes[i];
            let ocr = rec.ocr.get(i).map(|w| w.join(" ")).unwrap_or_default();
            index.write_record([
                crop.to_string(),
                rec.filepath.clone(),
                rec.pub_date.clone(),
                b.x1().to_string(),
                b.y1().to_string(),
                b.x2().to_string(),
                b.y2().to_string(),
                score.to_string(),
                class.code().to_string(),
                class.name().to_string(),
                ocr,
            ])?;
            report.exported += 1;
        }
    }
    index.flush().map_err(io_err(&index_path))?;
    let manifest_path = dest.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    let gaps_path = dest.join("gaps.txt");
    let gaps: String = report.gaps.iter().map(|g| format!("{g}\n")).collect();
    fs::write(&gaps_path, gaps).map_err(io_err(&gaps_path))?;
    Ok(report)
}
