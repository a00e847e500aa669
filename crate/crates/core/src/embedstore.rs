//! Per-page embedding files and exact nearest-neighbor search over them.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Suffix appended to a page record's file stem for its embedding file.
pub const EMBEDDINGS_SUFFIX: &str = "_embeddings";

pub const RESNET_18_DIM: usize = 512;
pub const RESNET_50_DIM: usize = 2048;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("query has dimension {got}, store holds {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cosine similarity is undefined for a zero query vector")]
    ZeroQuery,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One `<page>_embeddings.json` file. The vector lists align with
/// `visual_content_filepaths`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub filepath: String,
    pub resnet_50_embeddings: Vec<Vec<f32>>,
    pub resnet_18_embeddings: Vec<Vec<f32>>,
    pub visual_content_filepaths: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFamily {
    R18,
    R50,
}

impl EmbeddingFamily {
    pub fn dim(self) -> usize {
        match self {
            EmbeddingFamily::R18 => RESNET_18_DIM,
            EmbeddingFamily::R50 => RESNET_50_DIM,
        }
    }

    fn vectors(self, rec: &EmbeddingRecord) -> &[Vec<f32>] {
        match self {
            EmbeddingFamily::R18 => &rec.resnet_18_embeddings,
            EmbeddingFamily::R50 => &rec.resnet_50_embeddings,
        }
    }
}

impl FromStr for EmbeddingFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r18" | "resnet18" | "resnet_18" => Ok(EmbeddingFamily::R18),
            "r50" | "resnet50" | "resnet_50" => Ok(EmbeddingFamily::R50),
            other => Err(format!("unknown embedding family {other:?} (expected r18 or r50)")),
        }
    }
}

impl std::fmt::Display for EmbeddingFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingFamily::R18 => "r18",
            EmbeddingFamily::R50 => "r50",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoadDiagnostic {
    pub filepath: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub id: usize,
    pub filepath: String,
    /// Larger is more similar; negative distance for [`Metric::Euclidean`].
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

/// Immutable, contiguous vector index with precomputed norms.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    family: EmbeddingFamily,
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
    filepaths: Vec<String>,
    pages: Vec<String>,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

impl EmbeddingStore {
    /// Loads records in order; ids are assigned sequentially, so an identical
    /// stream always yields identical ids.
    pub fn load<I>(records: I, family: EmbeddingFamily) -> (Self, Vec<LoadDiagnostic>)
    where
        I: IntoIterator<Item = EmbeddingRecord>,
    {
        let dim = family.dim();
        let mut store = EmbeddingStore {
            family,
            dim,
            data: Vec::new(),
            norms: Vec::new(),
            filepaths: Vec::new(),
            pages: Vec::new(),
        };
        let mut diagnostics = Vec::new();
        for rec in records {
            if let Err(message) = check_record(&rec, family) {
                log::warn!("embedding record {} rejected: {message}", rec.filepath);
                diagnostics.push(LoadDiagnostic {
                    filepath: rec.filepath.clone(),
                    message,
                });
                continue;
            }
            for (v, crop) in family.vectors(&rec).iter().zip(&rec.visual_content_filepaths) {
                let norm = dot(v, v).sqrt();
                if norm == 0.0 {
                    log::warn!("zero embedding for {crop}; excluded from cosine queries");
                }
                store.data.extend_from_slice(v);
                store.norms.push(norm);
                store.filepaths.push(crop.clone());
                store.pages.push(rec.filepath.clone());
            }
        }
        (store, diagnostics)
    }

    /// Loads every `*_embeddings.json` under `dir`, in sorted path order.
    pub fn load_dir(dir: &Path, family: EmbeddingFamily) -> Result<(Self, Vec<LoadDiagnostic>), EmbedError> {
        let mut records = Vec::new();
        let mut diagnostics = Vec::new();
        for path in embedding_files(dir)? {
            let text = fs::read_to_string(&path).map_err(|source| EmbedError::Io {
                path: path.clone(),
                source,
            })?;
            match serde_json::from_str::<EmbeddingRecord>(&text) {
                Ok(rec) => records.push(rec),
                Err(e) => diagnostics.push(LoadDiagnostic {
                    filepath: path.display().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        let (store, mut more) = Self::load(records, family);
        diagnostics.append(&mut more);
        Ok((store, diagnostics))
    }

    pub fn family(&self) -> EmbeddingFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.filepaths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filepaths.is_empty()
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn filepath(&self, id: usize) -> &str {
        &self.filepaths[id]
    }

    pub fn page(&self, id: usize) -> &str {
        &self.pages[id]
    }

    pub fn is_zero(&self, id: usize) -> bool {
        self.norms[id] == 0.0
    }

    /// Finds a crop by exact path, falling back to a unique path-suffix match.
    pub fn find_crop(&self, path: &str) -> Option<usize> {
        if let Some(i) = self.filepaths.iter().position(|p| p == path) {
            return Some(i);
        }
        let mut hits = self
            .filepaths
            .iter()
            .enumerate()
            .filter(|(_, p)| p.ends_with(path) || path.ends_with(p.as_str()));
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    /// Exact top-`k` search. Ties resolve to the smaller id.
    pub fn query_topk(&self, query: &[f32], k: usize, metric: Metric) -> Result<QueryResult, EmbedError> {
        if k == 0 {
            return Err(EmbedError::ZeroK);
        }
        if self.is_empty() {
            return Ok(QueryResult { hits: Vec::new() });
        }
        if query.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                got: query.len(),
                want: self.dim,
            });
        }
        let mut scored: Vec<(usize, f64)> = match metric {
            Metric::Cosine => {
                let qn = dot(query, query).sqrt();
                if qn == 0.0 {
                    return Err(EmbedError::ZeroQuery);
                }
                (0..self.len())
                    .filter(|&i| self.norms[i] > 0.0)
                    .map(|i| (i, dot(query, self.vector(i)) / (qn * self.norms[i])))
                    .collect()
            }
            Metric::Euclidean => (0..self.len())
                .map(|i| (i, -sq_dist(query, self.vector(i)).sqrt()))
                .collect(),
        };
        let order = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(QueryResult {
            hits: scored
                .into_iter()
                .map(|(id, similarity)| Hit {
                    id,
                    filepath: self.filepaths[id].clone(),
                    similarity,
                })
                .collect(),
        })
    }
}

fn check_record(rec: &EmbeddingRecord, family: EmbeddingFamily) -> Result<(), String> {
    let n = rec.visual_content_filepaths.len();
    let chosen = family.vectors(rec);
    if chosen.len() != n {
        return Err(format!(
            "{} vectors for {} filepaths",
            chosen.len(),
            n
        ));
    }
    for (fam, list) in [
        (EmbeddingFamily::R18, &rec.resnet_18_embeddings),
        (EmbeddingFamily::R50, &rec.resnet_50_embeddings),
    ] {
        if fam != family && !list.is_empty() && list.len() != n {
            return Err(format!("{fam:?} list has {} vectors for {n} filepaths", list.len()));
        }
    }
    if let Some(v) = chosen.iter().find(|v| v.len() != family.dim()) {
        return Err(format!(
            "vector of dimension {} in {:?} (expected {})",
            v.len(),
            family,
            family.dim()
        ));
    }
    if chosen.iter().flatten().any(|x| !x.is_finite()) {
        return Err("non-finite vector component".into());
    }
    Ok(())
}

/// Path of the embedding file that accompanies a page record file.
pub fn embeddings_path_for(record_path: &Path) -> PathBuf {
    let stem = record_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    record_path.with_file_name(format!("{stem}{EMBEDDINGS_SUFFIX}.json"))
}

pub fn embedding_files(dir: &Path) -> Result<Vec<PathBuf>, EmbedError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| EmbedError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        let name = entry.file_name().to_string_lossy();
        if entry.file_type().is_file() && name.ends_with(&format!("{EMBEDDINGS_SUFFIX}.json")) {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(name: &str, vectors: Vec<Vec<f32>>) -> EmbeddingRecord {
        let n = vectors.len();
        EmbeddingRecord {
            filepath: name.to_string(),
            resnet_50_embeddings: Vec::new(),
            resnet_18_embeddings: vectors,
            visual_content_filepaths: (0..n).map(|i| format!("{name}_{i:03}.jpg")).collect(),
        }
    }

    fn unit(i: usize) -> Vec<f32> {
        let mut v = vec![0.0; RESNET_18_DIM];
        v[i] = 1.0;
        v
    }

    #[test]
    fn counts_vectors_and_is_deterministic() {
        let records = vec![
            rec("a", vec![unit(0)]),
            rec("b", vec![unit(1), unit(2)]),
            rec("c", vec![]),
        ];
        let (store, diags) = EmbeddingStore::load(records.clone(), EmbeddingFamily::R18);
        assert_eq!(store.len(), 3);
        assert!(diags.is_empty());
        let (again, _) = EmbeddingStore::load(records, EmbeddingFamily::R18);
        assert_eq!(store.filepaths, again.filepaths);
        assert_eq!(store.find_crop("b_001.jpg"), Some(2));
    }

    #[test]
    fn wrong_dimension_rejected() {
        let (store, diags) = EmbeddingStore::load(vec![rec("a", vec![vec![0.5; 511]])], EmbeddingFamily::R18);
        assert!(store.is_empty());
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("511"));
    }

    #[test]
    fn cosine_basics() {
        let (store, _) = EmbeddingStore::load(vec![rec("a", vec![unit(0), unit(1)])], EmbeddingFamily::R18);
        let res = store.query_topk(&unit(0), 2, Metric::Cosine).unwrap();
        assert_eq!(res.hits[0].id, 0);
        assert_eq!(res.hits[0].similarity, 1.0);
        assert_eq!(res.hits[1].similarity, 0.0);
        assert!(matches!(store.query_topk(&unit(0), 0, Metric::Cosine), Err(EmbedError::ZeroK)));
        assert!(matches!(
            store.query_topk(&[1.0; 3], 1, Metric::Cosine),
            Err(EmbedError::DimensionMismatch { got: 3, want: 512 })
        ));
        assert!(matches!(
            store.query_topk(&vec![0.0; 512], 1, Metric::Cosine),
            Err(EmbedError::ZeroQuery)
        ));
    }

    #[test]
    fn zero_vectors_only_in_euclidean() {
        let (store, _) = EmbeddingStore::load(vec![rec("a", vec![vec![0.0; 512], unit(3)])], EmbeddingFamily::R18);
        assert!(store.is_zero(0));
        let cos = store.query_topk(&unit(3), 5, Metric::Cosine).unwrap();
        assert_eq!(cos.hits.len(), 1);
        let l2 = store.query_topk(&unit(3), 5, Metric::Euclidean).unwrap();
        assert_eq!(l2.hits.len(), 2);
        assert_eq!(l2.hits[0].id, 1);
        assert_eq!(l2.hits[0].similarity, 0.0);
        assert_eq!(l2.hits[1].similarity, -1.0);
    }

    #[test]
    fn empty_store_and_ties() {
        let (empty, _) = EmbeddingStore::load(Vec::new(), EmbeddingFamily::R50);
        assert!(empty.query_topk(&[1.0; 3], 1, Metric::Cosine).unwrap().hits.is_empty());

        let (store, _) = EmbeddingStore::load(vec![rec("a", vec![unit(0), unit(0), unit(0)])], EmbeddingFamily::R18);
        let ids: Vec<_> = store.query_topk(&unit(0), 2, Metric::Cosine).unwrap().hits.iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn embeddings_path() {
        assert_eq!(
            embeddings_path_for(Path::new("out/b/seq-1.json")),
            PathBuf::from("out/b/seq-1_embeddings.json")
        );
    }
}
