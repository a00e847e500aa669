//! Page sources and batch manifests.
//!
//! A source is either a local directory or an HTTP base URL that mirrors the
//! corpus batch layout. Manifest entries are page image paths relative to
//! the source root; each image has a sibling OCR XML with the same stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_EXTENSIONS: [&str; 6] = ["jp2", "jpg", "jpeg", "png", "tif", "tiff"];

const MAX_CRAWL_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("GET {url}: {message}")]
    Http { url: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Source {
    Local(PathBuf),
    Http(String),
}

impl Source {
    pub fn parse(s: &str) -> Source {
        if s.starts_with("http://") || s.starts_with("https://") {
            Source::Http(s.trim_end_matches('/').to_string())
        } else {
            Source::Local(PathBuf::from(s))
        }
    }

    pub fn fetch(&self, rel: &str) -> Result<Vec<u8>, SourceError> {
        match self {
            Source::Local(root) => {
                let path = root.join(rel);
                std::fs::read(&path).map_err(|source| SourceError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
            Source::Http(base) => http_get(&format!("{base}/{}", rel.trim_start_matches('/'))),
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Source {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Ok(Source::parse(&s))
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Local(p) => write!(f, "{}", p.display()),
            Source::Http(u) => f.write_str(u),
        }
    }
}

fn http_get(url: &str) -> Result<Vec<u8>, SourceError> {
    let err = |message: String| SourceError::Http {
        url: url.to_string(),
        message,
    };
    let mut resp = ureq::get(url).call().map_err(|e| err(e.to_string()))?;
    let mut buf = Vec::new();
    resp.body_mut()
        .as_reader()
        .read_to_end(&mut buf)
        .map_err(|e| err(e.to_string()))?;
    Ok(buf)
}

/// Path of the OCR XML that accompanies a page image.
pub fn ocr_path_for(entry: &str) -> String {
    match entry.rsplit_once('.') {
        Some((stem, ext)) if !ext.contains('/') => format!("{stem}.xml"),
        _ => format!("{entry}.xml"),
    }
}

fn is_image(path: &str) -> bool {
    path.rsplit_once('.')
        .map(|(_, ext)| IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub batch_name: String,
    pub entries: Vec<String>,
}

impl Manifest {
    /// Parses a manifest file: one path per line, `#` comments and blank
    /// lines ignored, duplicates dropped. A `# batch: <name>` line names the
    /// batch. Only the first tab-separated field is read, so a failure
    /// manifest can be fed back in as-is.
    pub fn parse(text: &str, default_batch: &str) -> Manifest {
        let mut batch_name = default_batch.to_string();
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if !line.starts_with('#') {
                let line = line.split('\t').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                if seen.insert(line.to_string()) {
                    entries.push(line.to_string());
                } else {
                    log::warn!("duplicate manifest entry {line} ignored");
                }
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(name) = comment.trim().strip_prefix("batch:") {
                    batch_name = name.trim().to_string();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if seen.insert(line.to_string()) {
                entries.push(line.to_string());
            } else {
                log::warn!("duplicate manifest entry {line} ignored");
            }
        }
        Manifest {
            batch_name,
            entries,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# batch: {}\n", self.batch_name);
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lists every page image under `<source>/<batch_name>` that has a sibling
/// OCR XML. Returns the manifest and human-readable warnings.
pub fn build_manifest(source: &Source, batch_name: &str) -> Result<(Manifest, Vec<String>), SourceError> {
    let files = match source {
        Source::Local(root) => list_local(root, batch_name)?,
        Source::Http(base) => crawl_http(base, batch_name)?,
    };
    let all: BTreeSet<&str> = files.iter().map(String::as_str).collect();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for f in &all {
        if !is_image(f) {
            continue;
        }
        if all.contains(ocr_path_for(f).as_str()) {
            entries.push(f.to_string());
        } else {
            warnings.push(format!("{f}: no OCR XML alongside image, skipped"));
        }
    }
    if entries.is_empty() {
        warnings.push(format!("batch {batch_name} has no pages"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((
        Manifest {
            batch_name: batch_name.to_string(),
            entries,
        },
        warnings,
    ))
}

fn list_local(root: &Path, batch_name: &str) -> Result<Vec<String>, SourceError> {
    let dir = root.join(batch_name);
    let io = |path: &Path, source: std::io::Error| SourceError::Io {
        path: path.display().to_string(),
        source,
    };
    let meta = std::fs::metadata(&dir).map_err(|e| io(&dir, e))?;
    if !meta.is_dir() {
        return Err(io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(&dir).sort_by_file_name() {
        let entry = entry.map_err(|e| io(&dir, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        out.push(rel.join("/"));
    }
    Ok(out)
}

static HREF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)href\s*=\s*["']([^"'#?]+)["']"#).expect("valid regex"));

/// Walks HTML directory listings below `<base>/<batch>/`.
fn crawl_http(base: &str, batch_name: &str) -> Result<Vec<String>, SourceError> {
    let mut files = Vec::new();
    let mut queue: Vec<(String, usize)> = vec![(format!("{}/", batch_name.trim_matches('/')), 0)];
    let mut visited = BTreeMap::new();
    while let Some((dir, depth)) = queue.pop() {
        if visited.insert(dir.clone(), ()).is_some() || depth > MAX_CRAWL_DEPTH {
            continue;
        }
        let body = http_get(&format!("{base}/{dir}"))?;
        let html = String::from_utf8_lossy(&body);
        for cap in HREF.captures_iter(&html) {
            let href = &cap[1];
            if href.starts_with('/') || href.starts_with("..") || href.contains("://") || href == "./" {
                continue;
            }
            let child = format!("{dir}{href}");
            if href.ends_with('/') {
                queue.push((child, depth + 1));
            } else {
                files.push(child);
            }
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}
