//! `manifest.tsv`: one `relative_path<TAB>size_bytes<TAB>checksum` line per
//! file, sorted by path, LF line endings.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::digest;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub size_bytes: u64,
    pub checksum: String,
}

/// Entries keyed by relative path; iteration order is the on-disk order.
pub type Manifest = BTreeMap<String, ManifestEntry>;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("no manifest under {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

pub fn render(manifest: &Manifest) -> String {
    let mut out = String::new();
    for (path, entry) in manifest {
        out.push_str(path);
        out.push('\t');
        out.push_str(&entry.size_bytes.to_string());
        out.push('\t');
        out.push_str(&entry.checksum);
        out.push('\n');
    }
    out
}

pub fn parse(text: &str, origin: &str) -> Result<Manifest, ManifestError> {
    let mut manifest = Manifest::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| ManifestError::Malformed {
            path: origin.to_string(),
            line: idx + 1,
            reason: reason.to_string(),
        };
        let mut parts = line.split('\t');
        let (Some(path), Some(size), Some(checksum), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(malformed("expected three tab-separated fields"));
        };
        let size_bytes = size.parse().map_err(|_| malformed("size is not an integer"))?;
        manifest.insert(path.to_string(), ManifestEntry { size_bytes, checksum: checksum.to_string() });
    }
    Ok(manifest)
}

pub fn read(folder: &Path) -> Result<Manifest, ManifestError> {
    let path = folder.join(MANIFEST_FILE);
    let origin = path.display().to_string();
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ManifestError::Missing(folder.display().to_string()))
        }
        Err(source) => return Err(ManifestError::Io { path: origin, source }),
    };
    parse(&text, &origin)
}

/// Writes the manifest via a temporary file and rename.
pub fn write(folder: &Path, manifest: &Manifest) -> Result<(), ManifestError> {
    let path = folder.join(MANIFEST_FILE);
    let tmp = folder.join(format!(".{MANIFEST_FILE}.tmp"));
    let io_err = |source| ManifestError::Io { path: path.display().to_string(), source };
    fs::write(&tmp, render(manifest)).map_err(io_err)?;
    fs::rename(&tmp, &path).map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    Missing,
    SizeMismatch,
    ChecksumMismatch,
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ManifestMismatch {
    /// Path relative to the folder passed to [`verify_manifest`].
    pub path: String,
    pub kind: MismatchKind,
}

fn verify_folder(folder: &Path, prefix: &str, out: &mut Vec<ManifestMismatch>) -> Result<(), ManifestError> {
    let manifest = read(folder)?;
    for (rel, entry) in &manifest {
        let file = folder.join(rel);
        let shown = format!("{prefix}{rel}");
        let kind = match fs::metadata(&file) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Some(MismatchKind::Missing),
            Err(_) => Some(MismatchKind::Unreadable),
            Ok(meta) if meta.len() != entry.size_bytes => Some(MismatchKind::SizeMismatch),
            Ok(_) => match digest::sha256_file(&file) {
                Ok(sum) if sum == entry.checksum => None,
                Ok(_) => Some(MismatchKind::ChecksumMismatch),
                Err(_) => Some(MismatchKind::Unreadable),
            },
        };
        if let Some(kind) = kind {
            out.push(ManifestMismatch { path: shown, kind });
        }
    }
    Ok(())
}

/// Re-hashes every file listed in the manifest(s) under `path`.
///
/// `path` is either a site folder holding `manifest.tsv`, or a session
/// folder whose site subfolders hold one each.
pub fn verify_manifest(path: &Path) -> Result<Vec<ManifestMismatch>, ManifestError> {
    let mut out = Vec::new();
    if path.join(MANIFEST_FILE).is_file() {
        verify_folder(path, "", &mut out)?;
    } else {
        let entries =
            fs::read_dir(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        let mut sites: Vec<_> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().join(MANIFEST_FILE).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        if sites.is_empty() {
            return Err(ManifestError::Missing(path.display().to_string()));
        }
        sites.sort();
        for site in sites {
            verify_folder(&path.join(&site), &format!("{site}/"), &mut out)?;
        }
    }
    out.sort();
    Ok(out)
}
