//! Batched uploads of session folders to a remote store.
//!
//! Planning orders pending sessions largest-first and cuts the list where
//! the estimated duration would overrun the upload window. Execution copies
//! every file of a session, reads each one back from the remote to compare
//! hashes, and retries the whole session on any failure.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{Catalog, CatalogError, MediaAsset, TransferKind, TransferOutcome, TransferRecord};
use crate::digest;
use crate::ingest::{manifest, now, MANIFEST_FILE};

/// Store that sessions are archived to. Paths are `/`-separated and
/// relative to the store root.
pub trait Remote: Send + Sync {
    fn put_file(&self, remote_path: &str, local: &Path) -> io::Result<()>;
    /// SHA-256 of the stored object, hex-encoded.
    fn read_back_hash(&self, remote_path: &str) -> io::Result<String>;
    fn list(&self, prefix: &str) -> io::Result<Vec<String>>;
}

/// A directory standing in for the remote store.
#[derive(Debug, Clone)]
pub struct LocalDirRemote {
    root: PathBuf,
}

impl LocalDirRemote {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(LocalDirRemote { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, remote_path: &str) -> io::Result<PathBuf> {
        if remote_path.split('/').any(|c| c == ".." || c.is_empty()) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad remote path {remote_path:?}")));
        }
        Ok(self.root.join(remote_path))
    }
}

impl Remote for LocalDirRemote {
    fn put_file(&self, remote_path: &str, local: &Path) -> io::Result<()> {
        let dest = self.resolve(remote_path)?;
        let tmp = dest.with_extension("partial");
        digest::copy_and_hash(local, &tmp)?;
        std::fs::rename(&tmp, &dest)
    }

    fn read_back_hash(&self, remote_path: &str) -> io::Result<String> {
        digest::sha256_file(&self.resolve(remote_path)?)
    }

    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        if !self.root.exists() {
            return Ok(out);
        }
        for entry in walkdir::WalkDir::new(&self.root) {
            let entry = entry.map_err(io::Error::other)?;
            if entry.file_type().is_file() {
                let rel = relative_slash_path(&self.root, entry.path());
                if rel.starts_with(prefix) {
                    out.push(rel);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Test double that fails a set number of operations before delegating.
#[derive(Debug)]
pub struct FaultInjectingRemote<R> {
    inner: R,
    put_failures: AtomicUsize,
    corrupt_reads: AtomicUsize,
}

impl<R: Remote> FaultInjectingRemote<R> {
    /// Fails the next `put_failures` puts and reports a wrong hash for the
    /// next `corrupt_reads` read-backs. `usize::MAX` never recovers.
    pub fn new(inner: R, put_failures: usize, corrupt_reads: usize) -> Self {
        FaultInjectingRemote {
            inner,
            put_failures: AtomicUsize::new(put_failures),
            corrupt_reads: AtomicUsize::new(corrupt_reads),
        }
    }

    pub fn always_failing(inner: R) -> Self {
        Self::new(inner, usize::MAX, 0)
    }

    fn take(counter: &AtomicUsize) -> bool {
        counter
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| match n {
                0 => None,
                usize::MAX => Some(usize::MAX),
                n => Some(n - 1),
            })
            .is_ok()
    }
}

impl<R: Remote> Remote for FaultInjectingRemote<R> {
    fn put_file(&self, remote_path: &str, local: &Path) -> io::Result<()> {
        if Self::take(&self.put_failures) {
            return Err(io::Error::other(format!("injected failure writing {remote_path}")));
        }
        self.inner.put_file(remote_path, local)
    }

    fn read_back_hash(&self, remote_path: &str) -> io::Result<String> {
        let hash = self.inner.read_back_hash(remote_path)?;
        if Self::take(&self.corrupt_reads) {
            return Ok("0".repeat(hash.len()));
        }
        Ok(hash)
    }

    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        self.inner.list(prefix)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("upload window ends ({end}) before it starts ({start})")]
    BadWindow { start: NaiveDateTime, end: NaiveDateTime },
    #[error("throughput prior must be positive, got {0}")]
    BadThroughput(f64),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UploadWindow {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

impl UploadWindow {
    pub fn seconds(&self) -> f64 {
        (self.end - self.start).num_milliseconds() as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Expected sustained upload rate, used only for estimates.
    pub throughput_bytes_per_sec: f64,
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Parallel file transfers within one session.
    pub jobs: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { throughput_bytes_per_sec: 10.0 * 1024.0 * 1024.0, max_retries: 2, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedUpload {
    pub session_id: String,
    pub bytes: u64,
    pub file_count: usize,
    pub estimated_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UploadPlan {
    pub window: UploadWindow,
    pub items: Vec<PlannedUpload>,
    /// Pending sessions that did not fit the window.
    pub deferred: Vec<PlannedUpload>,
    pub notes: Vec<String>,
}

impl UploadPlan {
    pub fn estimated_secs(&self) -> f64 {
        self.items.iter().map(|i| i.estimated_secs).sum()
    }

    pub fn bytes(&self) -> u64 {
        self.items.iter().map(|i| i.bytes).sum()
    }

    /// Listing for operator review before an overnight run.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "upload plan for window {} .. {} ({:.1} min)",
            self.window.start.format("%Y-%m-%d %H:%M"),
            self.window.end.format("%Y-%m-%d %H:%M"),
            self.window.seconds() / 60.0
        );
        for (i, item) in self.items.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>3}. {:<16} {:>12} bytes {:>6} files  est {:>8.1} min",
                i + 1,
                item.session_id,
                item.bytes,
                item.file_count,
                item.estimated_secs / 60.0
            );
        }
        let _ = writeln!(
            out,
            "total: {} sessions, {} bytes, est {:.1} min",
            self.items.len(),
            self.bytes(),
            self.estimated_secs() / 60.0
        );
        for item in &self.deferred {
            let _ = writeln!(out, "deferred: {} ({} bytes)", item.session_id, item.bytes);
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

/// Sessions with a successful upload record.
pub fn uploaded_sessions(transfers: &[TransferRecord]) -> BTreeSet<String> {
    transfers
        .iter()
        .filter(|t| t.kind == TransferKind::RemoteUpload && t.outcome.succeeded())
        .map(|t| t.payload_path.clone())
        .collect()
}

/// Plans pending sessions largest-first, truncated to the window.
pub fn plan_upload(catalog: &Catalog, window: UploadWindow, config: &RemoteConfig) -> Result<UploadPlan, ArchiveError> {
    if window.end < window.start {
        return Err(ArchiveError::BadWindow { start: window.start, end: window.end });
    }
    if config.throughput_bytes_per_sec.is_nan() || config.throughput_bytes_per_sec <= 0.0 {
        return Err(ArchiveError::BadThroughput(config.throughput_bytes_per_sec));
    }
    let done = uploaded_sessions(&catalog.transfers()?);
    let mut sizes: BTreeMap<String, (u64, usize)> = BTreeMap::new();
    for asset in catalog.read::<MediaAsset>()? {
        if done.contains(&asset.session_id) {
            continue;
        }
        let entry = sizes.entry(asset.session_id).or_default();
        entry.0 += asset.size_bytes;
        entry.1 += 1;
    }
    let mut pending: Vec<PlannedUpload> = sizes
        .into_iter()
        .map(|(session_id, (bytes, file_count))| PlannedUpload {
            session_id,
            bytes,
            file_count,
            estimated_secs: bytes as f64 / config.throughput_bytes_per_sec,
        })
        .collect();
    pending.sort_by(|a, b| b.bytes.cmp(&a.bytes).then_with(|| a.session_id.cmp(&b.session_id)));

    let budget = window.seconds();
    let mut used = 0.0;
    let mut items = Vec::new();
    let mut deferred = Vec::new();
    for item in pending {
        if deferred.is_empty() && used + item.estimated_secs <= budget {
            used += item.estimated_secs;
            items.push(item);
        } else {
            deferred.push(item);
        }
    }
    let mut notes = Vec::new();
    if items.is_empty() && !deferred.is_empty() {
        notes.push("window too small for any pending session".to_string());
    } else if !deferred.is_empty() {
        notes.push(format!("{} session(s) deferred to a later window", deferred.len()));
    }
    Ok(UploadPlan { window, items, deferred, notes })
}

fn relative_slash_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

struct SourceFile {
    local: PathBuf,
    remote: String,
    size: u64,
    hash: String,
}

/// Files of a session folder with the hash each must have at the remote.
/// Files listed in a site manifest must still match it.
fn session_files(dest_root: &Path, session_id: &str) -> Result<Vec<SourceFile>, String> {
    let session_dir = dest_root.join(session_id);
    let mut expected: HashMap<PathBuf, String> = HashMap::new();
    let entries = std::fs::read_dir(&session_dir).map_err(|e| format!("{}: {e}", session_dir.display()))?;
    for entry in entries.filter_map(Result::ok) {
        let dir = entry.path();
        if dir.join(MANIFEST_FILE).is_file() {
            let m = manifest::read(&dir).map_err(|e| e.to_string())?;
            for (rel, e) in m {
                expected.insert(dir.join(rel), e.checksum);
            }
        }
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(&session_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy();
        if !entry.file_type().is_file() || name.starts_with('.') {
            continue;
        }
        let local = entry.path().to_path_buf();
        let hash = digest::sha256_file(&local).map_err(|e| format!("{}: {e}", local.display()))?;
        if let Some(want) = expected.get(&local) {
            if *want != hash {
                return Err(format!("{} no longer matches its manifest", local.display()));
            }
        }
        let size = entry.metadata().map_err(|e| e.to_string())?.len();
        files.push(SourceFile {
            remote: format!("{session_id}/{}", relative_slash_path(&session_dir, &local)),
            local,
            size,
            hash,
        });
    }
    Ok(files)
}

fn attempt_session(files: &[SourceFile], remote: &dyn Remote, pool: &rayon::ThreadPool) -> Result<(), String> {
    pool.install(|| {
        files.par_iter().try_for_each(|f| {
            remote.put_file(&f.remote, &f.local).map_err(|e| format!("put {}: {e}", f.remote))?;
            let stored = remote.read_back_hash(&f.remote).map_err(|e| format!("read back {}: {e}", f.remote))?;
            if stored != f.hash {
                return Err(format!("hash mismatch after writing {}", f.remote));
            }
            Ok(())
        })
    })
}

/// Uploads each planned session with verify-after-write and retries.
/// Every session yields one record, appended to the catalog as soon as the
/// session finishes; a failed session does not stop the rest.
pub fn execute_upload(
    plan: &UploadPlan,
    remote: &dyn Remote,
    catalog: &Catalog,
    dest_root: &Path,
    config: &RemoteConfig,
) -> Result<Vec<TransferRecord>, ArchiveError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.jobs.max(1)).build().expect("thread pool");
    let mut records = Vec::new();
    for item in &plan.items {
        let started_at = now();
        let max_attempts = config.max_retries + 1;
        let (outcome, attempts, bytes) = match session_files(dest_root, &item.session_id) {
            Err(reason) => {
                log::error!("{}: {reason}", item.session_id);
                (TransferOutcome::Failed, 1, 0)
            }
            Ok(files) => {
                let bytes = files.iter().map(|f| f.size).sum();
                let mut result = (TransferOutcome::Failed, max_attempts, bytes);
                for attempt in 1..=max_attempts {
                    match attempt_session(&files, remote, &pool) {
                        Ok(()) => {
                            let outcome = if attempt == 1 { TransferOutcome::Ok } else { TransferOutcome::RetriedOk };
                            result = (outcome, attempt, bytes);
                            break;
                        }
                        Err(reason) => log::warn!("{} attempt {attempt}: {reason}", item.session_id),
                    }
                }
                result
            }
        };
        let record = TransferRecord {
            transfer_id: format!("upload-{}-{}", item.session_id, started_at.format("%Y%m%dT%H%M%S%.6f")),
            kind: TransferKind::RemoteUpload,
            payload_path: item.session_id.clone(),
            bytes,
            started_at,
            finished_at: now().max(started_at),
            outcome,
            attempts,
        };
        catalog.append(std::slice::from_ref(&record))?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ByteStats {
    pub min: u64,
    pub max: u64,
    pub avg: f64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DurationStats {
    pub min_secs: f64,
    pub max_secs: f64,
    pub avg_secs: f64,
    pub total_secs: f64,
}

/// Min/max/avg/total of transfer sizes and durations. Durations are
/// accumulated in whole milliseconds. An empty input gives `count = 0` and
/// zeros everywhere.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TransferStats {
    pub count: usize,
    pub bytes: ByteStats,
    pub duration: DurationStats,
}

pub fn summarize_transfers(records: &[TransferRecord]) -> TransferStats {
    let Some(first) = records.first() else {
        return TransferStats::default();
    };
    let first_ms = first.duration_millis();
    let init = (first.bytes, first.bytes, 0u64, first_ms, first_ms, 0i64);
    let (bmin, bmax, btotal, dmin, dmax, dtotal) = records.iter().fold(init, |(bmin, bmax, bt, dmin, dmax, dt), r| {
        let ms = r.duration_millis();
        (bmin.min(r.bytes), bmax.max(r.bytes), bt + r.bytes, dmin.min(ms), dmax.max(ms), dt + ms)
    });
    let n = records.len() as f64;
    TransferStats {
        count: records.len(),
        bytes: ByteStats { min: bmin, max: bmax, avg: btotal as f64 / n, total: btotal },
        duration: DurationStats {
            min_secs: dmin as f64 / 1000.0,
            max_secs: dmax as f64 / 1000.0,
            avg_secs: dtotal as f64 / n / 1000.0,
            total_secs: dtotal as f64 / 1000.0,
        },
    }
}

pub fn summarize_by_kind(records: &[TransferRecord]) -> BTreeMap<TransferKind, TransferStats> {
    let mut grouped: BTreeMap<TransferKind, Vec<TransferRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.kind).or_default().push(r.clone());
    }
    grouped.into_iter().map(|(k, v)| (k, summarize_transfers(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 5, 3).unwrap().and_hms_opt(20, 0, 0).unwrap()
    }

    fn rec(bytes: u64, minutes: i64) -> TransferRecord {
        TransferRecord {
            transfer_id: format!("t{bytes}-{minutes}"),
            kind: TransferKind::RemoteUpload,
            payload_path: "s".into(),
            bytes,
            started_at: t0(),
            finished_at: t0() + chrono::Duration::minutes(minutes),
            outcome: TransferOutcome::Ok,
            attempts: 1,
        }
    }

    #[test]
    fn stats_arithmetic() {
        let s = summarize_transfers(&[rec(10, 1), rec(20, 2), rec(30, 3)]);
        assert_eq!(s.count, 3);
        assert_eq!(s.duration.min_secs, 60.0);
        assert_eq!(s.duration.max_secs, 180.0);
        assert_eq!(s.duration.avg_secs, 120.0);
        assert_eq!(s.duration.total_secs, 360.0);
        assert_eq!((s.bytes.min, s.bytes.max, s.bytes.total), (10, 30, 60));
        assert_eq!(s.bytes.avg, 20.0);
    }

    #[test]
    fn stats_single_and_empty() {
        let s = summarize_transfers(&[rec(7, 4)]);
        assert_eq!(s.duration.min_secs, s.duration.max_secs);
        assert_eq!(s.duration.avg_secs, s.duration.max_secs);
        assert_eq!(s.bytes.avg, 7.0);
        assert_eq!(summarize_transfers(&[]), TransferStats::default());
    }

    #[test]
    fn local_remote_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let remote = LocalDirRemote::new(dir.path().join("remote")).unwrap();
        let src = dir.path().join("a.bin");
        std::fs::write(&src, b"payload").unwrap();
        remote.put_file("s/a.bin", &src).unwrap();
        assert_eq!(remote.read_back_hash("s/a.bin").unwrap(), digest::sha256_file(&src).unwrap());
        assert_eq!(remote.list("s/").unwrap(), ["s/a.bin"]);
        assert!(remote.put_file("../x", &src).is_err());
    }

    #[test]
    fn fault_injection_counts_down() {
        let dir = tempfile::tempdir().unwrap();
        let remote = FaultInjectingRemote::new(LocalDirRemote::new(dir.path()).unwrap(), 1, 0);
        let src = dir.path().join("a.bin");
        std::fs::write(&src, b"x").unwrap();
        assert!(remote.put_file("a2.bin", &src).is_err());
        assert!(remote.put_file("a2.bin", &src).is_ok());
        let never = FaultInjectingRemote::always_failing(LocalDirRemote::new(dir.path()).unwrap());
        for _ in 0..5 {
            assert!(never.put_file("a3.bin", &src).is_err());
        }
    }
}
