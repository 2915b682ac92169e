//! Dataset download from a user-maintained manifest.
//!
//! Manifest lines: `dataset  file_name  url  [sha256]`, whitespace separated,
//! `#` starts a comment. `file://` URLs and bare paths are copied locally.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dataset: String,
    pub file_name: String,
    pub url: String,
    pub sha256: Option<String>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&f.len()) {
            bail!("manifest line {}: expected `dataset file url [sha256]`", n + 1);
        }
        if f[1].contains('/') || f[1].contains('\\') || f[1] == ".." {
            bail!("manifest line {}: file name {:?} must not contain a path", n + 1, f[1]);
        }
        out.push(ManifestEntry {
            dataset: f[0].to_owned(),
            file_name: f[1].to_owned(),
            url: f[2].to_owned(),
            sha256: f.get(3).map(|s| s.to_ascii_lowercase()),
        });
    }
    Ok(out)
}

fn open_source(url: &str) -> Result<Box<dyn Read>> {
    if url.starts_with("http://") || url.starts_with("https://") {
        let resp = ureq::get(url).call().with_context(|| format!("GET {url}"))?;
        Ok(Box::new(resp.into_body().into_reader()))
    } else {
        let path = url.strip_prefix("file://").unwrap_or(url);
        Ok(Box::new(std::fs::File::open(path).with_context(|| format!("opening {path}"))?))
    }
}

/// Download every file of `dataset` into `dest/dataset/`, verifying checksums
/// when the manifest gives one. Returns the written paths.
pub fn fetch(entries: &[ManifestEntry], dataset: &str, dest: &Path) -> Result<Vec<PathBuf>> {
    let selected: Vec<_> = entries.iter().filter(|e| e.dataset == dataset).collect();
    if selected.is_empty() {
        bail!("dataset {dataset:?} not in manifest");
    }
    let dir = dest.join(dataset);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for e in selected {
        let target = dir.join(&e.file_name);
        let partial = dir.join(format!("{}.part", e.file_name));
        log::info!("fetching {} -> {}", e.url, target.display());
        let mut src = open_source(&e.url)?;
        let mut out = std::fs::File::create(&partial)?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = src.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            out.write_all(&buf[..n])?;
        }
        out.sync_all()?;
        let digest = hex::encode(hasher.finalize());
        if let Some(expected) = &e.sha256 {
            if &digest != expected {
                std::fs::remove_file(&partial)?;
                bail!("{}: sha256 {digest} does not match manifest {expected}", e.file_name);
            }
        }
        std::fs::rename(&partial, &target)?;
        written.push(target);
    }
    Ok(written)
}
