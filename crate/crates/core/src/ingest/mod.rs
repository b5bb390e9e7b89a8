//! SD-card import into the `<dest>/<session>/<site>/` layout.
//!
//! Sessions are named after the collection date (`3May2024`). Files are
//! copied, never moved; each copy is hashed, deduplicated against the
//! catalog by checksum, listed in the site folder's `manifest.tsv`, and
//! recorded as a [`MediaAsset`].

pub mod manifest;
pub mod timestamp;

pub use manifest::{verify_manifest, ManifestError, ManifestMismatch, MismatchKind, MANIFEST_FILE};
pub use timestamp::{exif_datetime, extract_timestamp, jpeg_with_exif, timestamp_from_filename};

use std::collections::{BTreeSet, HashSet};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{
    Catalog, CatalogError, MediaAsset, MediaKind, TimestampSource, TransferKind, TransferOutcome, TransferRecord,
};
use crate::digest;

const MONTHS: [&str; 12] = ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

/// `2024-05-03` → `3May2024`.
pub fn session_folder_name(date: NaiveDate) -> String {
    format!("{}{}{}", date.day(), MONTHS[date.month0() as usize], date.year())
}

/// Inverse of [`session_folder_name`].
pub fn parse_session_folder_name(name: &str) -> Option<NaiveDate> {
    let digits = name.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > 2 || name.len() < digits + 3 + 4 {
        return None;
    }
    let day: u32 = name[..digits].parse().ok()?;
    let month = MONTHS.iter().position(|m| name[digits..].starts_with(m))? as u32 + 1;
    let year_text = name.get(digits + 3..)?;
    if year_text.len() != 4 || !year_text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let date = NaiveDate::from_ymd_opt(year_text.parse().ok()?, month, day)?;
    (session_folder_name(date) == name).then_some(date)
}

pub const DEFAULT_EXTENSIONS: [&str; 6] = ["jpg", "jpeg", "png", "avi", "mp4", "mov"];
const VIDEO_EXTENSIONS: [&str; 3] = ["avi", "mp4", "mov"];
const SYSTEM_NAMES: [&str; 5] = ["System Volume Information", "$RECYCLE.BIN", "Thumbs.db", "desktop.ini", "DCIM.ini"];

#[derive(Debug, Clone)]
pub struct ScanOptions {
    /// Lower-case extensions admitted as media.
    pub extensions: BTreeSet<String>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { extensions: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect() }
    }
}

impl ScanOptions {
    pub fn kind_of(&self, path: &Path) -> Option<MediaKind> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        if !self.extensions.contains(&ext) {
            return None;
        }
        Some(if VIDEO_EXTENSIONS.contains(&ext.as_str()) { MediaKind::Video } else { MediaKind::Image })
    }
}

fn is_hidden_or_system(name: &str) -> bool {
    name.starts_with('.') || SYSTEM_NAMES.iter().any(|s| s.eq_ignore_ascii_case(name))
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {}: {source}", path.display())]
    Unreadable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Unwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// A media file found on a source card.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub path: PathBuf,
    /// Path relative to the scanned root, `/`-separated.
    pub relative_path: String,
    pub size_bytes: u64,
    pub kind: MediaKind,
    pub captured_at: NaiveDateTime,
    pub timestamp_source: TimestampSource,
}

/// Media files under `folder` as `(absolute, relative)` pairs, sorted by the
/// relative path. Hidden and system entries are skipped.
pub fn list_media(folder: &Path, options: &ScanOptions) -> Result<Vec<(PathBuf, String, MediaKind)>, IngestError> {
    let unreadable = |path: &Path, source: io::Error| IngestError::Unreadable { path: path.to_path_buf(), source };
    std::fs::read_dir(folder).map_err(|e| unreadable(folder, e))?;
    let mut out = Vec::new();
    let walker = walkdir::WalkDir::new(folder)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !is_hidden_or_system(&e.file_name().to_string_lossy()));
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(folder).to_path_buf();
            let source = e.into_io_error().unwrap_or_else(|| io::Error::other("walk error"));
            unreadable(&path, source)
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(kind) = options.kind_of(entry.path()) else {
            continue;
        };
        let rel = entry
            .path()
            .strip_prefix(folder)
            .expect("walkdir yields paths under its root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        out.push((entry.path().to_path_buf(), rel, kind));
    }
    out.sort_by(|a, b| a.1.cmp(&b.1));
    Ok(out)
}

/// Lists media candidates on a card with sizes and capture times.
pub fn scan_source(source: &Path, options: &ScanOptions) -> Result<Vec<Candidate>, IngestError> {
    list_media(source, options)?
        .into_par_iter()
        .map(|(path, relative_path, kind)| {
            let meta =
                std::fs::metadata(&path).map_err(|source| IngestError::Unreadable { path: path.clone(), source })?;
            let mtime = meta.modified().unwrap_or(std::time::SystemTime::UNIX_EPOCH);
            let (captured_at, timestamp_source) = extract_timestamp(&path, kind, mtime);
            Ok(Candidate { path, relative_path, size_bytes: meta.len(), kind, captured_at, timestamp_source })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ImportOptions {
    pub scan: ScanOptions,
    /// Worker threads for hashing and copying.
    pub jobs: usize,
}

impl Default for ImportOptions {
    fn default() -> Self {
        ImportOptions {
            scan: ScanOptions::default(),
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportReport {
    pub session_id: String,
    pub site_id: String,
    pub files_copied: usize,
    pub bytes_copied: u64,
    pub duplicates_skipped: usize,
    pub duration_secs: f64,
    pub errors: Vec<FileError>,
    /// Destination folder of this card.
    pub destination: String,
}

impl ImportReport {
    pub fn candidates(&self) -> usize {
        self.files_copied + self.duplicates_skipped + self.errors.len()
    }
}

struct Copied {
    candidate: Candidate,
    checksum: String,
    bytes: u64,
}

/// Imports one card into `<dest_root>/<session>/<site_id>/`.
///
/// Per-file failures are collected in the report and never stop the
/// remaining files. Files whose checksum is already catalogued (or repeated
/// on the card) are skipped as duplicates. Running the same import twice
/// leaves the catalog unchanged the second time.
pub fn import_card(
    source: &Path,
    site_id: &str,
    collection_date: NaiveDate,
    catalog: &Catalog,
    dest_root: &Path,
    options: &ImportOptions,
) -> Result<ImportReport, IngestError> {
    let started = Instant::now();
    let started_at = now();
    let session_id = session_folder_name(collection_date);
    let site_dir = dest_root.join(&session_id).join(site_id);
    std::fs::create_dir_all(&site_dir).map_err(|source| IngestError::Unwritable { path: site_dir.clone(), source })?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(options.jobs.max(1)).build().expect("thread pool");

    let candidates = pool.install(|| scan_source(source, &options.scan))?;
    let hashes: Vec<io::Result<String>> =
        pool.install(|| candidates.par_iter().map(|c| digest::sha256_file(&c.path)).collect());

    let mut known: HashSet<String> = catalog.asset_ids()?.into_iter().collect();
    let mut errors = Vec::new();
    let mut duplicates = 0usize;
    let mut to_copy = Vec::new();
    for (candidate, hash) in candidates.into_iter().zip(hashes) {
        match hash {
            Err(e) => errors
                .push(FileError { path: candidate.relative_path.clone(), message: format!("hashing failed: {e}") }),
            Ok(sum) if !known.insert(sum.clone()) => duplicates += 1,
            Ok(sum) => to_copy.push((candidate, sum)),
        }
    }

    let copied: Vec<Result<Copied, FileError>> = pool.install(|| {
        to_copy.into_par_iter().map(|(candidate, checksum)| copy_one(candidate, checksum, &site_dir)).collect()
    });

    let mut done = Vec::new();
    for result in copied {
        match result {
            Ok(c) => done.push(c),
            Err(e) => errors.push(e),
        }
    }
    errors.sort_by(|a, b| a.path.cmp(&b.path));

    let assets: Vec<MediaAsset> = done
        .iter()
        .map(|c| MediaAsset {
            asset_id: c.checksum.clone(),
            site_id: site_id.to_string(),
            session_id: session_id.clone(),
            relative_path: format!("{site_id}/{}", c.candidate.relative_path),
            kind: c.candidate.kind,
            captured_at: c.candidate.captured_at,
            timestamp_source: c.candidate.timestamp_source,
            size_bytes: c.bytes,
            checksum: c.checksum.clone(),
            temperature_c: None,
        })
        .collect();
    let bytes_copied: u64 = done.iter().map(|c| c.bytes).sum();

    if !done.is_empty() {
        let mut manifest = match manifest::read(&site_dir) {
            Ok(m) => m,
            Err(ManifestError::Missing(_)) => manifest::Manifest::new(),
            Err(e) => return Err(e.into()),
        };
        for c in &done {
            manifest.insert(
                c.candidate.relative_path.clone(),
                manifest::ManifestEntry { size_bytes: c.bytes, checksum: c.checksum.clone() },
            );
        }
        manifest::write(&site_dir, &manifest)?;
    }
    catalog.append(&assets)?;

    let duration_secs = started.elapsed().as_secs_f64();
    if !done.is_empty() || !errors.is_empty() {
        let finished_at = now().max(started_at);
        catalog.append(&[TransferRecord {
            transfer_id: format!("import-{session_id}-{site_id}-{}", started_at.format("%Y%m%dT%H%M%S%.6f")),
            kind: TransferKind::CardImport,
            payload_path: format!("{session_id}/{site_id}"),
            bytes: bytes_copied,
            started_at,
            finished_at,
            outcome: if errors.is_empty() { TransferOutcome::Ok } else { TransferOutcome::Failed },
            attempts: 1,
        }])?;
    }

    Ok(ImportReport {
        session_id,
        site_id: site_id.to_string(),
        files_copied: done.len(),
        bytes_copied,
        duplicates_skipped: duplicates,
        duration_secs,
        errors,
        destination: site_dir.display().to_string(),
    })
}

fn copy_one(candidate: Candidate, checksum: String, site_dir: &Path) -> Result<Copied, FileError> {
    let fail = |message: String| FileError { path: candidate.relative_path.clone(), message };
    let dest = site_dir.join(&candidate.relative_path);
    if dest.exists() {
        // A previous interrupted run may have left the same bytes behind;
        // anything else is a name clash that must not be overwritten.
        match digest::sha256_file(&dest) {
            Ok(existing) if existing == checksum => {
                return Ok(Copied { bytes: candidate.size_bytes, candidate, checksum })
            }
            Ok(_) => return Err(fail(format!("destination {} exists with different content", dest.display()))),
            Err(e) => return Err(fail(format!("destination unreadable: {e}"))),
        }
    }
    match digest::copy_and_hash(&candidate.path, &dest) {
        Ok((bytes, written)) if written == checksum => Ok(Copied { candidate, checksum, bytes }),
        Ok(_) => {
            let _ = std::fs::remove_file(&dest);
            Err(fail("source changed during import".into()))
        }
        Err(e) => {
            let _ = std::fs::remove_file(&dest);
            Err(fail(format!("copy failed: {e}")))
        }
    }
}

pub(crate) fn now() -> NaiveDateTime {
    chrono::Local::now().naive_local()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_names() {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
        assert_eq!(session_folder_name(d(2024, 5, 3)), "3May2024");
        assert_eq!(session_folder_name(d(2024, 12, 25)), "25Dec2024");
        assert_eq!(parse_session_folder_name("3May2024"), Some(d(2024, 5, 3)));
        assert_eq!(parse_session_folder_name("25Dec2024"), Some(d(2024, 12, 25)));
        assert_eq!(parse_session_folder_name("03May2024"), None);
        assert_eq!(parse_session_folder_name("31Feb2024"), None);
        assert_eq!(parse_session_folder_name("S01"), None);
        assert_eq!(parse_session_folder_name("3May24"), None);
    }

    #[test]
    fn scan_admits_media_only() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.jpg"), b"a").unwrap();
        std::fs::write(dir.path().join("B.JPG"), b"b").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"n").unwrap();
        std::fs::write(dir.path().join(".hidden.jpg"), b"h").unwrap();
        std::fs::create_dir(dir.path().join(".Trashes")).unwrap();
        std::fs::write(dir.path().join(".Trashes/x.jpg"), b"x").unwrap();
        let found = scan_source(dir.path(), &ScanOptions::default()).unwrap();
        let names: Vec<_> = found.iter().map(|c| c.relative_path.as_str()).collect();
        assert_eq!(names, ["B.JPG", "a.jpg"]);
    }

    #[test]
    fn scan_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_source(dir.path(), &ScanOptions::default()).unwrap().is_empty());
        assert!(scan_source(&dir.path().join("nope"), &ScanOptions::default()).is_err());
    }

    #[test]
    fn video_kind() {
        let o = ScanOptions::default();
        assert_eq!(o.kind_of(Path::new("a.MP4")), Some(MediaKind::Video));
        assert_eq!(o.kind_of(Path::new("a.jpeg")), Some(MediaKind::Image));
        assert_eq!(o.kind_of(Path::new("a.txt")), None);
    }
}
