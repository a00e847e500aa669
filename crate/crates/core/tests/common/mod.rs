//! Fixtures and independent reference implementations shared by the
//! integration tests. The oracles work on raw arrays and never call the
//! library's geometry or ranking code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use newsnav_core::detect::{ClassId, Prediction, RETENTION_FLOOR};
use newsnav_core::evalmap::GroundTruth;
use newsnav_core::geometry::NormBox;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box with every side at least `min_side` long.
pub fn random_box(rng: &mut impl Rng, min_side: f64) -> [f64; 4] {
    let w = rng.random_range(min_side..=1.0);
    let h = rng.random_range(min_side..=1.0);
    let x1 = rng.random_range(0.0..=1.0 - w);
    let y1 = rng.random_range(0.0..=1.0 - h);
    [x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0)]
}

pub fn nb(b: [f64; 4]) -> NormBox {
    NormBox::new(b[0], b[1], b[2], b[3]).expect("valid box")
}

// ---------------------------------------------------------------------------
// Geometry oracles

/// Fraction of an `n × n` grid of cell centres covered by any box.
pub fn raster_union(boxes: &[[f64; 4]], n: usize) -> f64 {
    let mut hits = 0usize;
    for i in 0..n {
        let y = (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let x = (j as f64 + 0.5) / n as f64;
            if boxes.iter().any(|b| b[0] <= x && x < b[2] && b[1] <= y && y < b[3]) {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ---------------------------------------------------------------------------
// AP oracle: textbook definition, evaluated literally.

struct Scored {
    score: f64,
    tp: bool,
}

/// AP for one category at one IoU threshold. `preds` are
/// `(page, box, score)`, `gts` are `(page, box)`.
fn oracle_ap_at(preds: &[(&str, [f64; 4], f64)], gts: &[(&str, [f64; 4])], t: f64) -> f64 {
    let n_gt = gts.len();
    let pages: BTreeSet<&str> = preds.iter().map(|p| p.0).chain(gts.iter().map(|g| g.0)).collect();
    let mut pooled = Vec::new();
    for page in pages {
        let mut ps: Vec<&(&str, [f64; 4], f64)> = preds.iter().filter(|p| p.0 == page).collect();
        ps.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        let gs: Vec<[f64; 4]> = gts.iter().filter(|g| g.0 == page).map(|g| g.1).collect();
        let mut used = vec![false; gs.len()];
        for p in ps {
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            for (gi, g) in gs.iter().enumerate() {
                let v = oracle_iou(p.1, *g);
                if !used[gi] && v >= t && v > best_iou {
                    best = Some(gi);
                    best_iou = v;
                }
            }
            if let Some(gi) = best {
                used[gi] = true;
            }
            pooled.push(Scored {
                score: p.2,
                tp: best.is_some(),
            });
        }
    }
    pooled.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    // (tp count, rank) after each detection.
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, s) in pooled.iter().enumerate() {
        if s.tp {
            tp += 1;
        }
        points.push((tp, k + 1));
    }
    let mut total = 0.0;
    for level in 0..=100usize {
        // Interpolated precision: best precision at any recall >= level/100,
        // compared in integers to avoid rounding.
        let p = points
            .iter()
            .filter(|(tp, _)| tp * 100 >= level * n_gt)
            .map(|(tp, k)| *tp as f64 / *k as f64)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

pub struct OracleResult {
    pub per_category: BTreeMap<ClassId, Option<f64>>,
    pub map: f64,
    pub one_class: f64,
}

fn oracle_category(preds: &[(&str, [f64; 4], f64)], gts: &[(&str, [f64; 4])]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let sum: f64 = (0..10).map(|i| oracle_ap_at(preds, gts, (50 + 5 * i) as f64 / 100.0)).sum();
    Some(sum / 10.0)
}

pub fn oracle_evaluate(preds: &BTreeMap<String, Vec<Prediction>>, gts: &[GroundTruth]) -> OracleResult {
    let flat: Vec<(&str, [f64; 4], f64, ClassId)> = preds
        .iter()
        .flat_map(|(page, ps)| {
            ps.iter()
                .filter(|p| p.score >= RETENTION_FLOOR)
                .map(move |p| (page.as_str(), p.bbox.to_array(), p.score, p.class_id))
        })
        .collect();
    let mut per_category = BTreeMap::new();
    for c in ClassId::ALL {
        let ps: Vec<_> = flat.iter().filter(|p| p.3 == c).map(|p| (p.0, p.1, p.2)).collect();
        let gs: Vec<_> = gts
            .iter()
            .filter(|g| g.class_id == c)
            .map(|g| (g.page_id.as_str(), g.bbox.to_array()))
            .collect();
        per_category.insert(c, oracle_category(&ps, &gs));
    }
    let present: Vec<f64> = per_category.values().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;
    let all_p: Vec<_> = flat.iter().map(|p| (p.0, p.1, p.2)).collect();
    let all_g: Vec<_> = gts.iter().map(|g| (g.page_id.as_str(), g.bbox.to_array())).collect();
    OracleResult {
        per_category,
        map,
        one_class: oracle_category(&all_p, &all_g).unwrap_or(0.0),
    }
}

/// Random multi-page scene: at most `max_gt` ground truths and `max_pred`
/// predictions over at most `max_classes` classes. Predictions are a mix of
/// jittered ground truths and random boxes with random scores.
pub fn random_scene(
    rng: &mut impl Rng,
    max_gt: usize,
    max_pred: usize,
    max_classes: usize,
) -> (BTreeMap<String, Vec<Prediction>>, Vec<GroundTruth>) {
    let n_classes = rng.random_range(1..=max_classes);
    let mut all = ClassId::ALL.to_vec();
    let classes: Vec<ClassId> = (0..n_classes)
        .map(|_| all.remove(rng.random_range(0..all.len())))
        .collect();
    let n_pages = rng.random_range(1..=3);
    let page = |i: usize| format!("page-{i}");
    let n_gt = rng.random_range(1..=max_gt);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            page_id: page(rng.random_range(0..n_pages)),
            bbox: nb(random_box(rng, 0.05)),
            class_id: classes[rng.random_range(0..classes.len())],
        })
        .collect();
    let n_pred = rng.random_range(0..=max_pred);
    let mut preds: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for _ in 0..n_pred {
        let score = rng.random_range(0.0..1.0);
        let (page_id, bbox, class_id) = if rng.random_bool(0.6) {
            let g = &gts[rng.random_range(0..gts.len())];
            let b = g.bbox.to_array();
            let raw: [f64; 4] = std::array::from_fn(|k| b[k] + rng.random_range(-0.06..0.06));
            let bbox = NormBox::from_raw(raw[0], raw[1], raw[2], raw[3]).unwrap_or(g.bbox);
            let class = if rng.random_bool(0.85) {
                g.class_id
            } else {
                classes[rng.random_range(0..classes.len())]
            };
            (g.page_id.clone(), bbox, class)
        } else {
            (
                page(rng.random_range(0..n_pages)),
                nb(random_box(rng, 0.02)),
                classes[rng.random_range(0..classes.len())],
            )
        };
        preds.entry(page_id).or_default().push(Prediction::new(bbox, score, class_id));
    }
    (preds, gts)
}

// ---------------------------------------------------------------------------
// Nearest-neighbour oracle

/// Full ranking by the metric with ties to the smaller index; similarity
/// is cosine or negative euclidean distance.
pub fn brute_force_ranking(vectors: &[Vec<f32>], query: &[f32], cosine: bool) -> Vec<(usize, f64)> {
    let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut all: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .filter(|(_, v)| !cosine || norm(v) > 0.0)
        .map(|(i, v)| {
            let s = if cosine {
                let dot: f64 = v.iter().zip(query).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                dot / (norm(v) * qn)
            } else {
                -v.iter()
                    .zip(query)
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            (i, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

// ---------------------------------------------------------------------------
// Synthetic corpus

pub const FIXTURE_BATCH: &str = "batch_fixture";
pub const PAGE_WIDTH: u32 = 600;
pub const PAGE_HEIGHT: u32 = 900;
/// ALTO coordinates are in a unit twice as fine as image pixels.
pub const ALTO_SCALE: u32 = 2;

pub struct Word {
    pub text: String,
    pub hpos: u32,
    pub vpos: u32,
    pub width: u32,
    pub height: u32,
}

pub fn alto_xml(page_width: u32, page_height: u32, lines: &[Vec<Word>]) -> String {
    let mut s = String::from(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<alto xmlns=\"http://www.loc.gov/standards/alto/ns-v2#\">\n<Layout>\n",
    );
    s.push_str(&format!(
        "<Page ID=\"P1\" WIDTH=\"{page_width}\" HEIGHT=\"{page_height}\"><PrintSpace>\n<TextBlock ID=\"TB1\">\n"
    ));
    for line in lines {
        s.push_str("<TextLine>");
        for (i, w) in line.iter().enumerate() {
            if i > 0 {
                s.push_str("<SP/>");
            }
            s.push_str(&format!(
                "<String CONTENT=\"{}\" HPOS=\"{}\" VPOS=\"{}\" WIDTH=\"{}\" HEIGHT=\"{}\"/>",
                w.text, w.hpos, w.vpos, w.width, w.height
            ));
        }
        s.push_str("</TextLine>\n");
    }
    s.push_str("</TextBlock>\n</PrintSpace></Page>\n</Layout>\n</alto>\n");
    s
}

/// 12 lines of 6 words covering the page, in ALTO units.
pub fn fixture_words(page: usize) -> Vec<Vec<Word>> {
    let (w, h) = (PAGE_WIDTH * ALTO_SCALE, PAGE_HEIGHT * ALTO_SCALE);
    (0..12)
        .map(|line| {
            (0..6)
                .map(|col| Word {
                    text: format!("p{page}l{line}w{col}"),
                    hpos: col * w / 6 + 10,
                    vpos: line * h / 12 + 10,
                    width: w / 6 - 20,
                    height: h / 12 - 20,
                })
                .collect()
        })
        .collect()
}

pub fn fixture_png(page: usize) -> Vec<u8> {
    let img = GrayImage::from_fn(PAGE_WIDTH, PAGE_HEIGHT, |x, y| {
        let v = (x / 7 + y / 5 + page as u32 * 31) % 256;
        Luma([v as u8])
    });
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(img)
        .write_to(&mut buf, ImageFormat::Png)
        .expect("png encodes");
    buf.into_inner()
}

pub const FIXTURE_DATES: [&str; 5] = ["1861-04-12", "1862-09-17", "1863-07-04", "1863-11-19", "1900-01-01"];

/// Writes five page images with ALTO siblings under `root` and returns the
/// manifest entries in lexicographic order.
pub fn write_fixture_corpus(root: &Path) -> Vec<String> {
    let mut entries = Vec::new();
    for (i, date) in FIXTURE_DATES.iter().enumerate() {
        let dir = root.join(format!("{FIXTURE_BATCH}/sn99000001/{date}/ed-1"));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("seq-1.png"), fixture_png(i)).unwrap();
        let xml = alto_xml(PAGE_WIDTH * ALTO_SCALE, PAGE_HEIGHT * ALTO_SCALE, &fixture_words(i));
        fs::write(dir.join("seq-1.xml"), xml).unwrap();
        entries.push(format!("{FIXTURE_BATCH}/sn99000001/{date}/ed-1/seq-1.png"));
    }
    entries.sort();
    entries
}

/// Every file under `dir` as relative path to bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            (
                e.path().strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

/// Scores straddling the retention and embedding floors.
pub const STRADDLING_SCORES: [f64; 4] = [0.049, 0.05, 0.49, 0.5];

/// Predictions for every fixture page: one per straddling score (cycling
/// through cropped classes), plus a high-scoring headline and map.
pub fn straddling_predictions(entries: &[String]) -> String {
    let mut out = String::new();
    let cropped = [ClassId::Photograph, ClassId::Illustration, ClassId::Advertisement, ClassId::EditorialCartoon];
    for (pi, entry) in entries.iter().enumerate() {
        let mut preds = Vec::new();
        for (i, s) in STRADDLING_SCORES.iter().enumerate() {
            let x = 0.05 + 0.2 * i as f64;
            preds.push(Prediction::new(nb([x, 0.1, x + 0.15, 0.3]), *s, cropped[(i + pi) % 4]));
        }
        preds.push(Prediction::new(nb([0.0, 0.0, 1.0, 0.08]), 0.97, ClassId::Headline));
        preds.push(Prediction::new(nb([0.1, 0.5, 0.6, 0.9]), 0.93, ClassId::Map));
        let mut line = Vec::new();
        newsnav_core::detect::write_prediction_line(&mut line, entry, &preds).unwrap();
        out.push_str(std::str::from_utf8(&line).unwrap());
    }
    out
}
