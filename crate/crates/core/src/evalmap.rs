//! COCO-style average precision for box detections.
//!
//! Per category and IoU threshold, predictions are matched greedily to
//! ground truth on the same page, pooled across pages, sorted by score and
//! turned into a precision/recall curve. The curve is replaced by its
//! monotone non-increasing envelope and sampled at 101 recall levels
//! `0.00, 0.01, ..., 1.00`; AP is the mean of those samples, and the
//! category AP is the mean over IoU thresholds `0.50, 0.55, ..., 0.95`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cocoset::CocoDataset;
use crate::detect::{canonical_order, ClassId, LineDiagnostic, Prediction, RETENTION_FLOOR};
use crate::geometry::{iou, NormBox};

pub const RECALL_SAMPLES: usize = 101;

/// IoU thresholds 0.50 through 0.95 in steps of 0.05.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Recall levels at which the precision envelope is sampled.
pub fn recall_levels() -> [f64; RECALL_SAMPLES] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground truth to evaluate against")]
    NoGroundTruth,
    #[error("invalid IoU threshold {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub page_id: String,
    pub bbox: NormBox,
    pub class_id: ClassId,
}

/// One prediction after matching at a fixed IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub page_id: String,
    pub prediction: Prediction,
    pub matched: bool,
}

/// Greedy one-to-one matching for one page and one category.
///
/// Predictions are visited in canonical order (descending score); each takes
/// the still-unmatched ground truth with the highest IoU, provided that IoU
/// reaches `iou_threshold`. Equal IoUs resolve to the earlier ground truth.
/// Returns `(prediction, matched)` in visiting order.
pub fn match_at_threshold(
    preds: &[Prediction],
    gts: &[NormBox],
    iou_threshold: f64,
) -> Vec<(Prediction, bool)> {
    let mut sorted = preds.to_vec();
    sorted.sort_by(canonical_order);
    let ious: Vec<Vec<f64>> = sorted
        .iter()
        .map(|p| gts.iter().map(|g| iou(&p.bbox, g)).collect())
        .collect();
    greedy_match(&ious, gts.len(), iou_threshold)
        .into_iter()
        .zip(sorted)
        .map(|(m, p)| (p, m))
        .collect()
}

fn greedy_match(ious: &[Vec<f64>], n_gt: usize, iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; n_gt];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if taken[g] || v < iou_threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Global ordering of pooled outcomes: canonical prediction order, then page id.
fn outcome_order(a: &MatchOutcome, b: &MatchOutcome) -> Ordering {
    canonical_order(&a.prediction, &b.prediction).then_with(|| a.page_id.cmp(&b.page_id))
}

/// 101-point interpolated AP over outcomes pooled from every page.
///
/// `None` when `gt_count` is zero (AP is undefined).
pub fn average_precision(outcomes: &[MatchOutcome], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut sorted: Vec<&MatchOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| outcome_order(a, b));
    Some(ap_from_flags(sorted.iter().map(|o| o.matched), gt_count))
}

fn ap_from_flags(flags: impl Iterator<Item = bool>, gt_count: usize) -> f64 {
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for matched in flags {
        if matched {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let total: f64 = recall_levels()
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&rc| rc < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_SAMPLES as f64
}

/// Predictions and ground truth for one (page, category) cell, with the IoU
/// matrix computed once and reused across thresholds.
struct Cell {
    page_id: String,
    preds: Vec<Prediction>,
    ious: Vec<Vec<f64>>,
    n_gt: usize,
}

fn category_ap(cells: &[Cell], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let thresholds = iou_thresholds();
    let sum: f64 = thresholds
        .iter()
        .map(|&t| {
            let outcomes: Vec<MatchOutcome> = cells
                .iter()
                .flat_map(|c| {
                    greedy_match(&c.ious, c.n_gt, t)
                        .into_iter()
                        .zip(&c.preds)
                        .map(|(matched, p)| MatchOutcome {
                            page_id: c.page_id.clone(),
                            prediction: *p,
                            matched,
                        })
                })
                .collect();
            average_precision(&outcomes, gt_count).unwrap_or(0.0)
        })
        .sum();
    Some(sum / thresholds.len() as f64)
}

fn build_cells(
    preds: &BTreeMap<String, Vec<Prediction>>,
    gts: &[GroundTruth],
    relabel: Option<ClassId>,
) -> BTreeMap<ClassId, (Vec<Cell>, usize)> {
    let label = |c: ClassId| relabel.unwrap_or(c);
    let mut grid: BTreeMap<(ClassId, &str), (Vec<Prediction>, Vec<NormBox>)> = BTreeMap::new();
    for (page, ps) in preds {
        for p in ps.iter().filter(|p| p.score >= RETENTION_FLOOR) {
            let mut p = *p;
            p.class_id = label(p.class_id);
            grid.entry((p.class_id, page.as_str())).or_default().0.push(p);
        }
    }
    for g in gts {
        grid.entry((label(g.class_id), g.page_id.as_str()))
            .or_default()
            .1
            .push(g.bbox);
    }
    let mut out: BTreeMap<ClassId, (Vec<Cell>, usize)> = BTreeMap::new();
    for ((class, page), (mut ps, gs)) in grid {
        ps.sort_by(canonical_order);
        let ious = ps
            .iter()
            .map(|p| gs.iter().map(|g| iou(&p.bbox, g)).collect())
            .collect();
        let entry = out.entry(class).or_default();
        entry.1 += gs.len();
        entry.0.push(Cell {
            page_id: page.to_string(),
            preds: ps,
            ious,
            n_gt: gs.len(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    /// `None` for categories without ground truth.
    pub per_category_ap: BTreeMap<ClassId, Option<f64>>,
    pub map_value: f64,
    pub one_class_ap: f64,
    pub per_category_gt_counts: BTreeMap<ClassId, usize>,
}

impl ApResult {
    pub fn to_json(&self) -> serde_json::Value {
        let categories: Vec<_> = ClassId::ALL
            .iter()
            .map(|c| {
                json!({
                    "class_id": c.code(),
                    "name": c.name(),
                    "ap": self.per_category_ap.get(c).copied().flatten(),
                    "gt_count": self.per_category_gt_counts.get(c).copied().unwrap_or(0),
                })
            })
            .collect();
        json!({
            "categories": categories,
            "map": self.map_value,
            "one_class_ap": self.one_class_ap,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>8} {:>8}", "Category", "AP", "# GT");
        for c in ClassId::ALL {
            let ap = match self.per_category_ap.get(&c).copied().flatten() {
                Some(v) => format!("{:.1}%", v * 100.0),
                None => "N/A".to_string(),
            };
            let n = self.per_category_gt_counts.get(&c).copied().unwrap_or(0);
            let _ = writeln!(out, "{:<20} {:>8} {:>8}", c.name(), ap, n);
        }
        let _ = writeln!(out, "{:<20} {:>7.1}%", "Averaged (mAP)", self.map_value * 100.0);
        let _ = writeln!(out, "{:<20} {:>7.1}%", "One Class", self.one_class_ap * 100.0);
        out
    }
}

/// Full evaluation: per-category AP, mAP over categories with ground truth,
/// and AP after merging every class into one.
pub fn evaluate(
    preds: &BTreeMap<String, Vec<Prediction>>,
    gts: &[GroundTruth],
) -> Result<ApResult, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let cells = build_cells(preds, gts, None);
    let per_category: Vec<(ClassId, Option<f64>, usize)> = ClassId::ALL
        .par_iter()
        .map(|c| match cells.get(c) {
            Some((cs, n)) => (*c, category_ap(cs, *n), *n),
            None => (*c, None, 0),
        })
        .collect();

    let present: Vec<f64> = per_category.iter().filter_map(|(_, ap, _)| *ap).collect();
    let map_value = present.iter().sum::<f64>() / present.len() as f64;

    let merged = build_cells(preds, gts, Some(ClassId::Photograph));
    let (one_cells, one_n) = &merged[&ClassId::Photograph];
    let one_class_ap = category_ap(one_cells, *one_n).unwrap_or(0.0);

    Ok(ApResult {
        per_category_ap: per_category.iter().map(|(c, ap, _)| (*c, *ap)).collect(),
        map_value,
        one_class_ap,
        per_category_gt_counts: per_category.iter().map(|(c, _, n)| (*c, *n)).collect(),
    })
}

/// Ground truth from a COCO dataset; page ids are image file names.
pub fn ground_truth_from_coco(ds: &CocoDataset) -> (Vec<GroundTruth>, Vec<String>) {
    let images: BTreeMap<u64, _> = ds.images.iter().map(|i| (i.id, i)).collect();
    let mut gts = Vec::with_capacity(ds.annotations.len());
    let mut problems = Vec::new();
    for a in &ds.annotations {
        let Some(img) = images.get(&a.image_id) else {
            problems.push(format!("annotation {} references missing image {}", a.id, a.image_id));
            continue;
        };
        let Some(class_id) = crate::cocoset::class_for_category(a.category_id) else {
            problems.push(format!("annotation {} has unknown category {}", a.id, a.category_id));
            continue;
        };
        let [x, y, w, h] = a.bbox;
        match NormBox::from_pixels(x, y, w, h, f64::from(img.width), f64::from(img.height)) {
            Ok(bbox) => gts.push(GroundTruth {
                page_id: img.file_name.clone(),
                bbox,
                class_id,
            }),
            Err(e) => problems.push(format!("annotation {}: {e}", a.id)),
        }
    }
    (gts, problems)
}

#[derive(Deserialize)]
struct GroundTruthLine {
    page_id: String,
    boxes: Vec<[f64; 4]>,
    pred_classes: Vec<i64>,
}

/// Ground truth in the prediction wire format; any `scores` field is ignored.
pub fn read_ground_truth_jsonl<R: BufRead>(
    reader: R,
) -> std::io::Result<(Vec<GroundTruth>, Vec<LineDiagnostic>)> {
    let mut gts = Vec::new();
    let mut rejected = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<Vec<GroundTruth>, String> = serde_json::from_str::<GroundTruthLine>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| {
                if rec.boxes.len() != rec.pred_classes.len() {
                    return Err("boxes and pred_classes differ in length".into());
                }
                rec.boxes
                    .iter()
                    .zip(&rec.pred_classes)
                    .map(|(b, &code)| {
                        let class_id = ClassId::from_code(code)
                            .ok_or_else(|| format!("class code {code} outside 0-6"))?;
                        let bbox = NormBox::from_raw(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string())?;
                        Ok(GroundTruth {
                            page_id: rec.page_id.clone(),
                            bbox,
                            class_id,
                        })
                    })
                    .collect()
            });
        match parsed {
            Ok(mut v) => gts.append(&mut v),
            Err(message) => rejected.push(LineDiagnostic {
                line: idx + 1,
                message,
            }),
        }
    }
    Ok((gts, rejected))
}
