//! COCO-format training sets built from crowdsourced region exports.
//!
//! Category ids are `1..=7`, one more than the [`ClassId`] wire code.
//! Raw exports are read through an [`ExportMapping`]: JSON pointers naming
//! where pages, regions, labels and coordinates live, so a different export
//! layout only needs a new mapping file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detect::ClassId;

/// The mapping shipped with the crate.
pub const DEFAULT_MAPPING: &str = include_str!("../config/export_mapping.v1.json");

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("mapping: {0}")]
    Mapping(String),
    #[error("export: {0}")]
    Export(String),
    #[error("split needs at least 2 images, found {0}")]
    TooFewImages(usize),
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

pub fn category_id(class: ClassId) -> u64 {
    u64::from(class.code()) + 1
}

pub fn class_for_category(id: u64) -> Option<ClassId> {
    id.checked_sub(1)
        .and_then(|c| i64::try_from(c).ok())
        .and_then(ClassId::from_code)
}

pub fn standard_categories() -> Vec<CocoCategory> {
    ClassId::ALL
        .iter()
        .map(|c| CocoCategory {
            id: category_id(*c),
            name: c.name().to_string(),
            supercategory: None,
        })
        .collect()
}

impl CocoDataset {
    pub fn empty() -> Self {
        Self {
            images: Vec::new(),
            annotations: Vec::new(),
            categories: standard_categories(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CocoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String, CocoError> {
        Ok(serde_json::to_string(self)?)
    }

    /// Annotation counts per class, keyed by the standard category ids.
    pub fn category_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts: BTreeMap<ClassId, usize> = ClassId::ALL.iter().map(|c| (*c, 0)).collect();
        for a in &self.annotations {
            if let Some(c) = class_for_category(a.category_id) {
                *counts.entry(c).or_default() += 1;
            }
        }
        counts
    }

    /// Checks id uniqueness, referential integrity, positive boxes and the
    /// seven-category vocabulary. Returns a list of problems (empty when valid).
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut image_ids = BTreeSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                problems.push(format!("duplicate image id {}", img.id));
            }
            if img.width == 0 || img.height == 0 {
                problems.push(format!("image {} has zero dimension", img.id));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                problems.push(format!("duplicate annotation id {}", a.id));
            }
            if !image_ids.contains(&a.image_id) {
                problems.push(format!("annotation {} references missing image {}", a.id, a.image_id));
            }
            if class_for_category(a.category_id).is_none() {
                problems.push(format!("annotation {} has category {}", a.id, a.category_id));
            }
            let [_, _, w, h] = a.bbox;
            if !(w > 0.0 && h > 0.0) {
                problems.push(format!("annotation {} has non-positive size", a.id));
            }
        }
        if self.categories != standard_categories() {
            problems.push("categories differ from the seven standard classes".into());
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BboxPointers {
    pub x: String,
    pub y: String,
    pub width: String,
    pub height: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateUnits {
    Pixels,
    /// Fractions of the page width/height.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFilter {
    pub pointer: String,
    pub equals: Value,
}

/// Where each field lives in a raw export (JSON pointers, RFC 6901).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMapping {
    pub version: u32,
    /// Pointer to the array of records; `""` for a top-level array.
    pub records: String,
    /// Page key inside a record. Also the key into the dimension map.
    pub page: String,
    /// Array of regions inside a record; `None` when each record is one region.
    #[serde(default)]
    pub regions: Option<String>,
    pub category: String,
    pub bbox: BboxPointers,
    pub units: CoordinateUnits,
    #[serde(default)]
    pub filter: Option<RegionFilter>,
    #[serde(default)]
    pub category_aliases: BTreeMap<String, String>,
}

impl Default for ExportMapping {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_MAPPING).expect("bundled mapping is valid")
    }
}

impl ExportMapping {
    pub fn from_json(text: &str) -> Result<Self, CocoError> {
        let mapping: ExportMapping = serde_json::from_str(text)?;
        if mapping.version != 1 {
            return Err(CocoError::Mapping(format!(
                "unsupported mapping version {}",
                mapping.version
            )));
        }
        Ok(mapping)
    }

    fn resolve_class(&self, label: &str) -> Option<ClassId> {
        let label = self
            .category_aliases
            .get(label)
            .map(String::as_str)
            .unwrap_or(label);
        label.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// Zero-based position of the region in export order.
    pub region: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversion {
    pub dataset: CocoDataset,
    pub counts: BTreeMap<ClassId, usize>,
    pub rejections: Vec<Rejection>,
    pub warnings: Vec<String>,
    pub input_regions: usize,
}

fn pointer_f64(v: &Value, ptr: &str) -> Option<f64> {
    v.pointer(ptr).and_then(|x| match x {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    })
}

fn pointer_str(v: &Value, ptr: &str) -> Option<String> {
    v.pointer(ptr).and_then(|x| match x {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    })
}

struct Accepted {
    page: String,
    class: ClassId,
    bbox: [f64; 4],
}

/// Converts a raw region export into a COCO dataset.
///
/// `image_dims` maps page keys to `(width, height)` in pixels.
pub fn convert(
    raw: &Value,
    mapping: &ExportMapping,
    image_dims: &BTreeMap<String, (u32, u32)>,
) -> Result<Conversion, CocoError> {
    let records = if mapping.records.is_empty() {
        raw
    } else {
        raw.pointer(&mapping.records).ok_or_else(|| {
            CocoError::Export(format!("records pointer {:?} not found", mapping.records))
        })?
    };
    let records = records
        .as_array()
        .ok_or_else(|| CocoError::Export("records are not an array".into()))?;

    let mut regions: Vec<(Option<String>, &Value)> = Vec::new();
    for rec in records {
        let page = pointer_str(rec, &mapping.page);
        match &mapping.regions {
            Some(ptr) => match rec.pointer(ptr).and_then(Value::as_array) {
                Some(list) => regions.extend(list.iter().map(|r| (page.clone(), r))),
                None => log::debug!("record without region list: {rec}"),
            },
            None => regions.push((page, rec)),
        }
    }

    let mut rejections = Vec::new();
    let mut warnings = Vec::new();
    let mut accepted = Vec::new();
    for (idx, (page, region)) in regions.iter().enumerate() {
        let mut reject = |reason: String| rejections.push(Rejection { region: idx, reason });
        if let Some(f) = &mapping.filter {
            if region.pointer(&f.pointer) != Some(&f.equals) {
                reject("filtered out (not verified)".into());
                continue;
            }
        }
        let Some(page) = page else {
            reject("missing page key".into());
            continue;
        };
        let Some(label) = pointer_str(region, &mapping.category) else {
            reject("missing category".into());
            continue;
        };
        let Some(class) = mapping.resolve_class(&label) else {
            reject(format!("unknown category label {label:?}"));
            continue;
        };
        let Some(&(img_w, img_h)) = image_dims.get(page) else {
            reject(format!("no dimensions for page {page:?}"));
            continue;
        };
        let coords = (
            pointer_f64(region, &mapping.bbox.x),
            pointer_f64(region, &mapping.bbox.y),
            pointer_f64(region, &mapping.bbox.width),
            pointer_f64(region, &mapping.bbox.height),
        );
        let (Some(mut x), Some(mut y), Some(mut w), Some(mut h)) = coords else {
            reject("missing box coordinate".into());
            continue;
        };
        if mapping.units == CoordinateUnits::Normalized {
            x *= f64::from(img_w);
            w *= f64::from(img_w);
            y *= f64::from(img_h);
            h *= f64::from(img_h);
        }
        if w < 0.0 {
            x += w;
            w = -w;
        }
        if h < 0.0 {
            y += h;
            h = -h;
        }
        let (x0, y0) = (x.max(0.0), y.max(0.0));
        let x1 = (x + w).min(f64::from(img_w));
        let y1 = (y + h).min(f64::from(img_h));
        if x0 != x || y0 != y || x1 != x + w || y1 != y + h {
            warnings.push(format!("region {idx} on {page} clamped to the image"));
        }
        if !(x1 > x0 && y1 > y0) {
            reject("box has no area inside the image".into());
            continue;
        }
        accepted.push(Accepted {
            page: page.clone(),
            class,
            bbox: [x0, y0, x1 - x0, y1 - y0],
        });
    }

    let pages: BTreeSet<&str> = accepted.iter().map(|a| a.page.as_str()).collect();
    let images: Vec<CocoImage> = pages
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (width, height) = image_dims[*p];
            CocoImage {
                id: i as u64 + 1,
                file_name: p.to_string(),
                width,
                height,
            }
        })
        .collect();
    let image_ids: BTreeMap<&str, u64> = images.iter().map(|i| (i.file_name.as_str(), i.id)).collect();
    let annotations: Vec<CocoAnnotation> = accepted
        .iter()
        .enumerate()
        .map(|(i, a)| CocoAnnotation {
            id: i as u64 + 1,
            image_id: image_ids[a.page.as_str()],
            category_id: category_id(a.class),
            bbox: a.bbox,
            area: a.bbox[2] * a.bbox[3],
            iscrowd: 0,
        })
        .collect();
    let dataset = CocoDataset {
        images,
        annotations,
        categories: standard_categories(),
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Conversion {
        counts: dataset.category_counts(),
        dataset,
        rejections,
        warnings,
        input_regions: regions.len(),
    })
}

/// Re-labels a COCO file that uses its own category ids onto the standard
/// seven, matching categories by name.
pub fn normalize_categories(
    foreign: &CocoDataset,
    aliases: &BTreeMap<String, String>,
) -> Result<Conversion, CocoError> {
    let mut by_id = BTreeMap::new();
    for c in &foreign.categories {
        let name = aliases.get(&c.name).unwrap_or(&c.name);
        let class: ClassId = name
            .parse()
            .map_err(|e: String| CocoError::Mapping(format!("category {}: {e}", c.id)))?;
        by_id.insert(c.id, class);
    }
    let mut rejections = Vec::new();
    let mut annotations = Vec::with_capacity(foreign.annotations.len());
    for (idx, a) in foreign.annotations.iter().enumerate() {
        match by_id.get(&a.category_id) {
            Some(class) => {
                let mut a = a.clone();
                a.category_id = category_id(*class);
                annotations.push(a);
            }
            None => rejections.push(Rejection {
                region: idx,
                reason: format!("unknown category id {}", a.category_id),
            }),
        }
    }
    let dataset = CocoDataset {
        images: foreign.images.clone(),
        annotations,
        categories: standard_categories(),
    };
    Ok(Conversion {
        counts: dataset.category_counts(),
        dataset,
        rejections,
        warnings: Vec::new(),
        input_regions: foreign.annotations.len(),
    })
}

/// Reads pixel dimensions for each page key from image files under `root`.
pub fn probe_dimensions<'a>(
    root: &Path,
    pages: impl IntoIterator<Item = &'a str>,
) -> (BTreeMap<String, (u32, u32)>, Vec<String>) {
    let mut dims = BTreeMap::new();
    let mut missing = Vec::new();
    for p in pages {
        match image::image_dimensions(root.join(p)) {
            Ok(d) => {
                dims.insert(p.to_string(), d);
            }
            Err(e) => missing.push(format!("{p}: {e}")),
        }
    }
    (dims, missing)
}

/// Page keys referenced by an export under `mapping`.
pub fn export_pages(raw: &Value, mapping: &ExportMapping) -> BTreeSet<String> {
    let records = if mapping.records.is_empty() {
        Some(raw)
    } else {
        raw.pointer(&mapping.records)
    };
    records
        .and_then(Value::as_array)
        .map(|rs| rs.iter().filter_map(|r| pointer_str(r, &mapping.page)).collect())
        .unwrap_or_default()
}

/// Image-level train/validation split.
///
/// `round(val_fraction * N)` images go to validation; all annotations of an
/// image follow it. Deterministic for a given seed.
pub fn split(
    dataset: &CocoDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(CocoDataset, CocoDataset), CocoError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CocoError::BadFraction(val_fraction));
    }
    let n = dataset.images.len();
    if n < 2 {
        return Err(CocoError::TooFewImages(n));
    }
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut ids: Vec<u64> = dataset.images.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let val_ids: BTreeSet<u64> = ids[..n_val].iter().copied().collect();

    let part = |in_val: bool| {
        let mut images: Vec<CocoImage> = dataset
            .images
            .iter()
            .filter(|i| val_ids.contains(&i.id) == in_val)
            .cloned()
            .collect();
        images.sort_by_key(|i| i.id);
        let annotations = dataset
            .annotations
            .iter()
            .filter(|a| val_ids.contains(&a.image_id) == in_val)
            .cloned()
            .collect();
        CocoDataset {
            images,
            annotations,
            categories: dataset.categories.clone(),
        }
    };
    Ok((part(false), part(true)))
}
