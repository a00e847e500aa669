//! Python bindings for the newspaper visual-content toolkit.
//!
//! Boxes cross the boundary as `NormBox` objects or `[x1, y1, x2, y2]`
//! lists; predictions as `(box, score, class_id)` tuples.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use newsnav_core::alto;
use newsnav_core::detect::{self, ClassId, Prediction, StubDetector, WireRecord};
use newsnav_core::embedstore::{self, EmbeddingFamily, Metric};
use newsnav_core::evalmap::{self, GroundTruth};
use newsnav_core::geometry::{self, NormBox};
use newsnav_core::pipeline::{self, ContainmentPolicy, PageRecord};

type PyPrediction = ([f64; 4], f64, u8);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_box(b: [f64; 4]) -> PyResult<NormBox> {
    NormBox::new(b[0], b[1], b[2], b[3]).map_err(value_err)
}

fn to_class(code: i64) -> PyResult<ClassId> {
    ClassId::from_code(code).ok_or_else(|| value_err(format!("class id {code} outside 0-6")))
}

fn to_prediction((b, score, class): ([f64; 4], f64, i64)) -> PyResult<Prediction> {
    if !(0.0..=1.0).contains(&score) {
        return Err(value_err(format!("score {score} outside [0, 1]")));
    }
    Ok(Prediction::new(to_box(b)?, score, to_class(class)?))
}

fn from_prediction(p: &Prediction) -> PyPrediction {
    (p.bbox.to_array(), p.score, p.class_id.code())
}

/// Normalized page rectangle `[x1, y1, x2, y2]` with `0 <= x1 < x2 <= 1`.
#[pyclass(name = "NormBox", module = "newsnav", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyNormBox(NormBox);

#[pymethods]
impl PyNormBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        to_box([x1, y1, x2, y2]).map(PyNormBox)
    }

    /// Lenient constructor: swaps inverted corners and clamps to `[0, 1]`.
    #[staticmethod]
    fn from_raw(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        NormBox::from_raw(x1, y1, x2, y2).map(PyNormBox).map_err(value_err)
    }

    /// From a pixel-space `(x, y, width, height)` rectangle.
    #[staticmethod]
    fn from_pixels(x: f64, y: f64, w: f64, h: f64, page_width: f64, page_height: f64) -> PyResult<Self> {
        NormBox::from_pixels(x, y, w, h, page_width, page_height)
            .map(PyNormBox)
            .map_err(value_err)
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1()
    }

    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1()
    }

    #[getter]
    fn x2(&self) -> f64 {
        self.0.x2()
    }

    #[getter]
    fn y2(&self) -> f64 {
        self.0.y2()
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn to_list(&self) -> [f64; 4] {
        self.0.to_array()
    }

    fn iou(&self, other: PyRef<'_, PyNormBox>) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn contains_point(&self, x: f64, y: f64) -> bool {
        geometry::contains_point(&self.0, x, y)
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.to_array();
        format!("NormBox({a}, {b}, {c}, {d})")
    }
}

#[pyfunction]
fn iou(a: PyRef<'_, PyNormBox>, b: PyRef<'_, PyNormBox>) -> f64 {
    geometry::iou(&a.0, &b.0)
}

/// Exact area of the union of the boxes.
#[pyfunction]
fn union_area(boxes: Vec<PyRef<'_, PyNormBox>>) -> f64 {
    let boxes: Vec<NormBox> = boxes.iter().map(|b| b.0).collect();
    geometry::union_area(&boxes)
}

/// Half-open containment: `x1 <= x < x2` and `y1 <= y < y2`.
#[pyfunction]
fn contains_point(b: PyRef<'_, PyNormBox>, x: f64, y: f64) -> bool {
    geometry::contains_point(&b.0, x, y)
}

/// Class names indexed by class id.
#[pyfunction]
fn class_names() -> Vec<&'static str> {
    ClassId::ALL.iter().map(|c| c.name()).collect()
}

/// Class id for a name, alias or numeric string.
#[pyfunction]
fn class_id(name: &str) -> PyResult<u8> {
    name.parse::<ClassId>().map(ClassId::code).map_err(value_err)
}

#[pyfunction]
fn parse_pub_date(page_path: &str) -> PyResult<String> {
    pipeline::parse_pub_date(page_path).map_err(value_err)
}

/// Parsed OCR page with word boxes normalized to the page.
#[pyclass(name = "AltoPage", module = "newsnav", frozen)]
struct PyAltoPage(alto::AltoPage);

#[pymethods]
impl PyAltoPage {
    /// `(text, [x1, y1, x2, y2], reading_order)` for every word.
    #[getter]
    fn tokens(&self) -> Vec<(String, [f64; 4], usize)> {
        self.0
            .tokens
            .iter()
            .map(|t| (t.text.clone(), t.bbox.to_array(), t.order_index))
            .collect()
    }

    #[getter]
    fn source_width(&self) -> f64 {
        self.0.source_width
    }

    #[getter]
    fn source_height(&self) -> f64 {
        self.0.source_height
    }

    #[getter]
    fn skipped(&self) -> usize {
        self.0.skipped
    }

    /// Words inside `region` in reading order; policy is center, full or any-overlap.
    #[pyo3(signature = (region, policy = "center"))]
    fn words_in_box(&self, region: PyRef<'_, PyNormBox>, policy: &str) -> PyResult<Vec<String>> {
        let policy: ContainmentPolicy = policy.parse().map_err(value_err)?;
        Ok(pipeline::extract_ocr_in_box(&self.0, &region.0, policy))
    }

    fn __len__(&self) -> usize {
        self.0.tokens.len()
    }
}

#[pyfunction]
fn parse_alto(xml: &[u8], image_width: u32, image_height: u32) -> PyResult<PyAltoPage> {
    alto::parse_alto(xml, image_width, image_height)
        .map(PyAltoPage)
        .map_err(value_err)
}

/// Deterministic stub predictions for a page id, in canonical order.
#[pyfunction]
fn stub_predictions(page_id: &str) -> Vec<PyPrediction> {
    StubDetector.predictions_for(page_id).iter().map(from_prediction).collect()
}

/// The stub's predictions for a page as one wire-format JSON line.
#[pyfunction]
fn stub_prediction_line(page_id: &str) -> String {
    let rec = WireRecord::from_predictions(page_id, &StubDetector.predictions_for(page_id));
    serde_json::to_string(&rec).expect("wire record serializes")
}

/// Reads line-delimited prediction records.
///
/// Returns `(by_page, rejected, below_floor)` where `rejected` lists
/// `(line_number, message)` for lines that were dropped.
#[pyfunction]
#[pyo3(signature = (text, floor = detect::RETENTION_FLOOR))]
#[allow(clippy::type_complexity)]
fn read_predictions(
    text: &str,
    floor: f64,
) -> PyResult<(BTreeMap<String, Vec<PyPrediction>>, Vec<(usize, String)>, usize)> {
    let set = detect::read_predictions_with_floor(text.as_bytes(), floor).map_err(value_err)?;
    let by_page = set
        .by_page
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(from_prediction).collect()))
        .collect();
    let rejected = set.rejected.into_iter().map(|d| (d.line, d.message)).collect();
    Ok((by_page, rejected, set.below_floor))
}

/// One wire-format JSON line for a page's predictions.
#[pyfunction]
fn prediction_line(page_id: &str, predictions: Vec<([f64; 4], f64, i64)>) -> PyResult<String> {
    let preds: Vec<Prediction> = predictions.into_iter().map(to_prediction).collect::<PyResult<_>>()?;
    let rec = WireRecord::from_predictions(page_id, &preds);
    Ok(serde_json::to_string(&rec).expect("wire record serializes"))
}

/// AP evaluation.
///
/// `predictions` maps page id to `(box, score, class_id)` tuples;
/// `ground_truth` is a list of `(page_id, box, class_id)`. Returns a dict
/// with `per_category` (name to AP, `None` without ground truth), `map` and
/// `one_class_ap`.
#[pyfunction]
fn evaluate(
    py: Python<'_>,
    predictions: BTreeMap<String, Vec<([f64; 4], f64, i64)>>,
    ground_truth: Vec<(String, [f64; 4], i64)>,
) -> PyResult<Py<PyAny>> {
    let preds: BTreeMap<String, Vec<Prediction>> = predictions
        .into_iter()
        .map(|(k, v)| Ok((k, v.into_iter().map(to_prediction).collect::<PyResult<_>>()?)))
        .collect::<PyResult<_>>()?;
    let gts: Vec<GroundTruth> = ground_truth
        .into_iter()
        .map(|(page_id, b, c)| {
            Ok(GroundTruth {
                page_id,
                bbox: to_box(b)?,
                class_id: to_class(c)?,
            })
        })
        .collect::<PyResult<_>>()?;
    let result = py
        .detach(|| evalmap::evaluate(&preds, &gts))
        .map_err(value_err)?;
    let per_category: BTreeMap<&str, Option<f64>> = result
        .per_category_ap
        .iter()
        .map(|(c, ap)| (c.name(), *ap))
        .collect();
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("per_category", per_category)?;
    dict.set_item("map", result.map_value)?;
    dict.set_item("one_class_ap", result.one_class_ap)?;
    Ok(dict.into_any().unbind())
}

/// Structural problems of a page record JSON document (empty when valid).
#[pyfunction]
fn validate_page_record(json: &str) -> Vec<String> {
    match serde_json::from_str::<PageRecord>(json) {
        Ok(r) => r.validate(),
        Err(e) => vec![e.to_string()],
    }
}

/// Exact nearest-neighbour index over one embedding family.
#[pyclass(name = "EmbeddingStore", module = "newsnav", frozen)]
struct PyEmbeddingStore(embedstore::EmbeddingStore);

#[pymethods]
impl PyEmbeddingStore {
    /// Loads every `*_embeddings.json` under `directory`.
    ///
    /// Returns the store and a list of `(file, message)` diagnostics.
    #[staticmethod]
    #[pyo3(signature = (directory, family = "r50"))]
    fn load_dir(directory: PathBuf, family: &str) -> PyResult<(Self, Vec<(String, String)>)> {
        let family: EmbeddingFamily = family.parse().map_err(value_err)?;
        let (store, diags) = embedstore::EmbeddingStore::load_dir(&directory, family)
            .map_err(|e| PyOSError::new_err(e.to_string()))?;
        Ok((Self(store), diags.into_iter().map(|d| (d.filepath, d.message)).collect()))
    }

    /// Builds a store from embedding-record JSON documents.
    #[staticmethod]
    #[pyo3(signature = (records, family = "r50"))]
    fn from_json(records: Vec<String>, family: &str) -> PyResult<(Self, Vec<(String, String)>)> {
        let family: EmbeddingFamily = family.parse().map_err(value_err)?;
        let parsed: Vec<embedstore::EmbeddingRecord> = records
            .iter()
            .map(|r| serde_json::from_str(r).map_err(value_err))
            .collect::<PyResult<_>>()?;
        let (store, diags) = embedstore::EmbeddingStore::load(parsed, family);
        Ok((Self(store), diags.into_iter().map(|d| (d.filepath, d.message)).collect()))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn filepath(&self, id: usize) -> PyResult<String> {
        self.check(id)?;
        Ok(self.0.filepath(id).to_string())
    }

    fn vector(&self, id: usize) -> PyResult<Vec<f32>> {
        self.check(id)?;
        Ok(self.0.vector(id).to_vec())
    }

    fn find_crop(&self, path: &str) -> Option<usize> {
        self.0.find_crop(path)
    }

    /// Top-`k` as `(crop filepath, similarity)`; larger is more similar.
    #[pyo3(signature = (query, k = 10, metric = "cosine"))]
    fn query(&self, py: Python<'_>, query: Vec<f32>, k: usize, metric: &str) -> PyResult<Vec<(String, f64)>> {
        let metric: Metric = metric.parse().map_err(value_err)?;
        let result = py
            .detach(|| self.0.query_topk(&query, k, metric))
            .map_err(value_err)?;
        Ok(result.hits.into_iter().map(|h| (h.filepath, h.similarity)).collect())
    }
}

impl PyEmbeddingStore {
    fn check(&self, id: usize) -> PyResult<()> {
        if id < self.0.len() {
            Ok(())
        } else {
            Err(pyo3::exceptions::PyIndexError::new_err(format!("id {id} out of range")))
        }
    }
}

#[pymodule]
fn newsnav(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RETENTION_FLOOR", detect::RETENTION_FLOOR)?;
    m.add("EMBEDDING_FLOOR", detect::EMBEDDING_FLOOR)?;
    m.add("DOWNSAMPLE_FACTOR", pipeline::DEFAULT_DOWNSAMPLE_FACTOR)?;
    m.add("EMBEDDINGS_SUFFIX", embedstore::EMBEDDINGS_SUFFIX)?;
    m.add_class::<PyNormBox>()?;
    m.add_class::<PyAltoPage>()?;
    m.add_class::<PyEmbeddingStore>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(union_area, m)?)?;
    m.add_function(wrap_pyfunction!(contains_point, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add_function(wrap_pyfunction!(class_id, m)?)?;
    m.add_function(wrap_pyfunction!(parse_pub_date, m)?)?;
    m.add_function(wrap_pyfunction!(parse_alto, m)?)?;
    m.add_function(wrap_pyfunction!(stub_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(stub_prediction_line, m)?)?;
    m.add_function(wrap_pyfunction!(read_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_line, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(validate_page_record, m)?)?;
    Ok(())
}
