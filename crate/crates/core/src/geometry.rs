//! Axis-aligned rectangles in page-normalized coordinates.
//!
//! Every box in the toolkit is a [`NormBox`]: `[x1, y1, x2, y2]` with the
//! origin at the top-left corner, x divided by page width and y by page
//! height.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinate is not finite: {0:?}")]
    NonFinite([f64; 4]),
    #[error("box coordinates out of [0,1]: {0:?}")]
    OutOfRange([f64; 4]),
    #[error("box has zero area: {0:?}")]
    ZeroArea([f64; 4]),
    #[error("box corners are inverted: {0:?}")]
    Inverted([f64; 4]),
}

/// A normalized, non-degenerate, axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl NormBox {
    /// Strict constructor: requires `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let raw = [x1, y1, x2, y2];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(raw));
        }
        if raw.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GeometryError::OutOfRange(raw));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Inverted(raw));
        }
        if x1 == x2 || y1 == y2 {
            return Err(GeometryError::ZeroArea(raw));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Lenient constructor for coordinates arriving from files and detectors.
    ///
    /// Swaps inverted corners, clamps to the unit square (logging when it
    /// does), then validates. Zero-area results are still an error.
    pub fn from_raw(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let raw = [x1, y1, x2, y2];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(raw));
        }
        let (x1, x2) = if x1 > x2 { (x2, x1) } else { (x1, x2) };
        let (y1, y2) = if y1 > y2 { (y2, y1) } else { (y1, y2) };
        let clamped = [x1, y1, x2, y2].map(|v| v.clamp(0.0, 1.0));
        if clamped != [x1, y1, x2, y2] {
            log::debug!("clamped box {raw:?} to {clamped:?}");
        }
        let [x1, y1, x2, y2] = clamped;
        Self::new(x1, y1, x2, y2)
    }

    /// Builds a normalized box from an absolute pixel rectangle `(x, y, w, h)`.
    pub fn from_pixels(
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        page_width: f64,
        page_height: f64,
    ) -> Result<Self, GeometryError> {
        Self::from_raw(
            x / page_width,
            y / page_height,
            (x + w) / page_width,
            (y + h) / page_height,
        )
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &NormBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// True when `other` lies entirely inside `self` (closed edges).
    pub fn contains_box(&self, other: &NormBox) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }
}

impl fmt::Display for NormBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl TryFrom<[f64; 4]> for NormBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

impl Serialize for NormBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NormBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(deserializer)?;
        NormBox::try_from(raw).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Half-open containment test: `x1 <= x < x2` and `y1 <= y < y2`.
pub fn contains_point(b: &NormBox, x: f64, y: f64) -> bool {
    b.x1 <= x && x < b.x2 && b.y1 <= y && y < b.y2
}

/// Exact area of the union of `boxes`.
///
/// Coordinate compression on x: between each pair of adjacent x-cuts the set
/// of boxes spanning the slab is fixed, so the covered length in y is the
/// measure of a union of intervals over the compressed y-cuts.
pub fn union_area(boxes: &[NormBox]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x1, b.x2]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut by_y1: Vec<&NormBox> = boxes.iter().collect();
    by_y1.sort_by(|a, b| a.y1.total_cmp(&b.y1));

    let mut total = 0.0;
    for slab in xs.windows(2) {
        let (left, right) = (slab[0], slab[1]);
        let mut covered = 0.0;
        let mut run: Option<(f64, f64)> = None;
        for b in by_y1.iter().filter(|b| b.x1 <= left && b.x2 >= right) {
            match run {
                Some((start, end)) if b.y1 <= end => run = Some((start, end.max(b.y2))),
                Some((start, end)) => {
                    covered += end - start;
                    run = Some((b.y1, b.y2));
                }
                None => run = Some((b.y1, b.y2)),
            }
        }
        if let Some((start, end)) = run {
            covered += end - start;
        }
        total += covered * (right - left);
    }
    total.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(x1: f64, y1: f64, x2: f64, y2: f64) -> NormBox {
        NormBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts covered cell centers on an `n`×`n` grid.
    fn raster_union(boxes: &[NormBox], n: usize) -> f64 {
        let mut hits = 0usize;
        for i in 0..n {
            let y = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                if boxes.iter().any(|b| contains_point(b, x, y)) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (n * n) as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&nb(0.0, 0.0, 1.0, 1.0), &nb(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert_eq!(iou(&nb(0.0, 0.0, 0.5, 0.5), &nb(0.5, 0.5, 1.0, 1.0)), 0.0);

        let a = nb(0.0, 0.0, 0.5, 1.0);
        let b = nb(0.25, 0.0, 0.75, 1.0);
        let inter = raster_union(&[a], 1000) + raster_union(&[b], 1000) - raster_union(&[a, b], 1000);
        let oracle = inter / raster_union(&[a, b], 1000);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-3);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn union_area_examples() {
        let q = nb(0.0, 0.0, 0.5, 0.5);
        assert_eq!(union_area(&[]), 0.0);
        assert_eq!(union_area(&[q]), 0.25);
        assert_eq!(union_area(&[q, q]), 0.25);
        let pair = [nb(0.0, 0.0, 0.5, 1.0), nb(0.25, 0.0, 0.75, 1.0)];
        assert!((raster_union(&pair, 1000) - 0.75).abs() < 2e-3);
        assert!((union_area(&pair) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn union_of_disjoint_columns_and_nested() {
        let boxes = [
            nb(0.0, 0.0, 0.1, 0.1),
            nb(0.0, 0.2, 0.1, 0.3),
            nb(0.0, 0.0, 0.05, 0.05),
        ];
        assert!((union_area(&boxes) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn contains_point_is_half_open() {
        assert!(contains_point(&nb(0.0, 0.0, 1.0, 1.0), 0.5, 0.5));
        assert!(!contains_point(&nb(0.0, 0.0, 0.5, 0.5), 0.5, 0.5));
        assert!(contains_point(&nb(0.2, 0.2, 0.4, 0.4), 0.2, 0.3));
    }

    #[test]
    fn construction_rules() {
        assert!(matches!(NormBox::new(0.1, 0.1, 0.1, 0.2), Err(GeometryError::ZeroArea(_))));
        assert!(matches!(NormBox::new(0.3, 0.1, 0.1, 0.2), Err(GeometryError::Inverted(_))));
        assert!(matches!(NormBox::new(0.0, 0.0, 1.1, 0.2), Err(GeometryError::OutOfRange(_))));
        assert!(matches!(NormBox::new(f64::NAN, 0.0, 1.0, 0.2), Err(GeometryError::NonFinite(_))));

        let swapped = NormBox::from_raw(0.6, 0.9, 0.2, 0.1).unwrap();
        assert_eq!(swapped.to_array(), [0.2, 0.1, 0.6, 0.9]);
        let clamped = NormBox::from_raw(-0.01, 0.5, 1.02, 0.7).unwrap();
        assert_eq!(clamped.to_array(), [0.0, 0.5, 1.0, 0.7]);
        assert!(NormBox::from_raw(1.2, 0.0, 1.5, 0.5).is_err());
    }

    #[test]
    fn serde_as_array() {
        let b = nb(0.1, 0.2, 0.3, 0.4);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[0.1,0.2,0.3,0.4]");
        let back: NormBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<NormBox>("[0.3,0.2,0.1,0.4]").is_err());
    }
}
