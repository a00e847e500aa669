mod common;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;

use common::*;
use newsnav_core::detect::StubDetector;
use newsnav_core::pipeline::{self, build_manifest, PipelineConfig, PixelGridEmbedder, Source};

/// Serves `root` with HTML directory listings, one thread per connection.
fn serve(root: PathBuf) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let root = root.clone();
            thread::spawn(move || handle(stream, &root));
        }
    });
    format!("http://{addr}")
}

fn handle(mut stream: TcpStream, root: &Path) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header).unwrap_or(0) == 0 || header == "\r\n" {
            break;
        }
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/");
    let local = root.join(path.trim_start_matches('/'));
    let (status, body) = if local.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&local)
            .unwrap()
            .flatten()
            .map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                if e.path().is_dir() { format!("{name}/") } else { name }
            })
            .collect();
        names.sort();
        let mut html = String::from("<html><body><a href=\"../\">Parent</a>\n");
        for n in names {
            html.push_str(&format!("<a href=\"{n}\">{n}</a>\n"));
        }
        html.push_str("</body></html>");
        ("200 OK", html.into_bytes())
    } else if let Ok(bytes) = fs::read(&local) {
        ("200 OK", bytes)
    } else {
        ("404 Not Found", b"not found".to_vec())
    };
    let head = format!("HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(&body);
}

#[test]
fn http_manifest_and_run_match_local() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    let entries = write_fixture_corpus(&root);
    // An image without OCR is left out of the manifest.
    fs::write(root.join(format!("{FIXTURE_BATCH}/orphan.png")), fixture_png(0)).unwrap();
    let base = serve(root.clone());

    let (http_manifest, warnings) = build_manifest(&Source::parse(&base), FIXTURE_BATCH).unwrap();
    let (local_manifest, _) = build_manifest(&Source::Local(root.clone()), FIXTURE_BATCH).unwrap();
    assert_eq!(http_manifest.entries, entries);
    assert_eq!(http_manifest, local_manifest);
    assert!(warnings.iter().any(|w| w.contains("orphan.png")));

    let run = |source: Source, out: &Path| {
        let cfg = PipelineConfig {
            source,
            worker_count: 2,
            ..PipelineConfig::default()
        };
        pipeline::run(&http_manifest, &StubDetector, Some(&PixelGridEmbedder), &cfg, out).unwrap()
    };
    let http_out = dir.path().join("http");
    let local_out = dir.path().join("local");
    let report = run(Source::parse(&base), &http_out);
    assert_eq!(report.success.len(), 5);
    run(Source::Local(root), &local_out);
    assert_eq!(snapshot(&http_out), snapshot(&local_out));
}

#[test]
fn http_missing_page_fails_at_fetch() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    let mut entries = write_fixture_corpus(&root);
    entries.push(format!("{FIXTURE_BATCH}/sn99000001/1899-01-01/ed-1/seq-1.png"));
    let base = serve(root);
    let manifest = pipeline::Manifest {
        batch_name: FIXTURE_BATCH.into(),
        entries,
    };
    let cfg = PipelineConfig {
        source: Source::parse(&base),
        worker_count: 2,
        ..PipelineConfig::default()
    };
    let report = pipeline::run(&manifest, &StubDetector, None, &cfg, &dir.path().join("out")).unwrap();
    assert_eq!(report.success.len(), 5);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].stage, pipeline::Stage::Fetch);
}
