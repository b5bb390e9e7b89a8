//! Append-only on-disk catalog.
//!
//! A catalog is a plain directory holding a `catalog.meta` descriptor and one
//! newline-delimited JSON journal per table. Journals are only ever appended
//! to. Each `append` call writes its records with a single `write_all`, so a
//! crash can at worst leave one truncated trailing line, which readers detect
//! and skip.
//!
//! Writers take an advisory lock on `catalog.lock` for the duration of an
//! append and fail fast if another writer holds it.

mod records;

pub use records::*;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::Serialize;

use crate::kv;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "catalog.meta";
pub const LOCK_FILE: &str = "catalog.lock";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported catalog format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("malformed catalog descriptor: {0}")]
    BadDescriptor(String),
    #[error("invalid {table} record at index {index}: {reason}")]
    Invalid { table: Table, index: usize, reason: String },
    #[error("duplicate {table} key {key}")]
    DuplicateKey { table: Table, key: String },
    #[error("catalog is locked by another writer ({})", .0.display())]
    Locked(PathBuf),
    #[error("serializing {table} record: {source}")]
    Serialize {
        table: Table,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CatalogError + '_ {
    move |source| CatalogError::Io { path: path.to_path_buf(), source }
}

/// A line that could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedLine {
    pub table: Table,
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Orphan {
    pub table: Table,
    pub asset_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub orphans: Vec<Orphan>,
    pub duplicate_keys: Vec<(Table, String)>,
    pub malformed_lines: Vec<MalformedLine>,
}

impl IntegrityReport {
    pub fn is_empty(&self) -> bool {
        self.orphans.is_empty() && self.duplicate_keys.is_empty() && self.malformed_lines.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    pub start: NaiveDateTime,
    /// Inclusive.
    pub end: NaiveDateTime,
}

impl TimeRange {
    pub fn contains(&self, t: NaiveDateTime) -> bool {
        self.start <= t && t <= self.end
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssetFilter {
    pub site_id: Option<String>,
    pub session_id: Option<String>,
    pub time_range: Option<TimeRange>,
    pub kind: Option<MediaKind>,
}

impl AssetFilter {
    pub fn matches(&self, asset: &MediaAsset) -> bool {
        self.site_id.as_ref().is_none_or(|s| *s == asset.site_id)
            && self.session_id.as_ref().is_none_or(|s| *s == asset.session_id)
            && self.time_range.is_none_or(|r| r.contains(asset.captured_at))
            && self.kind.is_none_or(|k| k == asset.kind)
    }
}

/// Handle to an opened catalog directory.
#[derive(Debug, Clone)]
pub struct Catalog {
    root: PathBuf,
    created_at: String,
}

struct Scan<R> {
    records: Vec<(usize, R)>,
    malformed: Vec<MalformedLine>,
}

impl Catalog {
    /// Opens the catalog at `root`, creating the directory, descriptor and
    /// empty journals if missing. Existing files are never modified.
    pub fn open(root: impl AsRef<Path>) -> Result<Catalog> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let meta_path = root.join(META_FILE);
        let created_at = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            let meta = kv::parse_map(&text).map_err(|e| CatalogError::BadDescriptor(e.to_string()))?;
            let version: u32 = meta
                .get("format_version")
                .ok_or_else(|| CatalogError::BadDescriptor("missing format_version".into()))?
                .parse()
                .map_err(|_| CatalogError::BadDescriptor("format_version is not an integer".into()))?;
            if version != FORMAT_VERSION {
                return Err(CatalogError::UnsupportedVersion(version));
            }
            meta.get("created_at").cloned().unwrap_or_default()
        } else {
            let created_at = chrono::Local::now().naive_local().format("%Y-%m-%dT%H:%M:%S").to_string();
            let version = FORMAT_VERSION.to_string();
            let text = kv::render([("format_version", version.as_str()), ("created_at", created_at.as_str())]);
            write_new_file(&meta_path, text.as_bytes())?;
            created_at
        };
        for table in Table::ALL {
            let path = root.join(table.file_name());
            if !path.exists() {
                OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            }
        }
        Ok(Catalog { root, created_at })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn created_at(&self) -> &str {
        &self.created_at
    }

    pub fn journal_path(&self, table: Table) -> PathBuf {
        self.root.join(table.file_name())
    }

    /// Validates and appends `records` to their journal. All records are
    /// written or none are.
    pub fn append<R: Record>(&self, records: &[R]) -> Result<usize> {
        let table = R::TABLE;
        for (index, record) in records.iter().enumerate() {
            record.validate().map_err(|reason| CatalogError::Invalid { table, index, reason })?;
        }
        if records.is_empty() {
            return Ok(0);
        }
        let _lock = self.lock()?;
        let needs_keys = records.iter().any(|r| r.primary_key().is_some());
        if needs_keys {
            let mut seen: HashSet<String> =
                self.scan::<R>()?.records.iter().filter_map(|(_, r)| r.primary_key().map(str::to_string)).collect();
            for record in records {
                if let Some(key) = record.primary_key() {
                    if !seen.insert(key.to_string()) {
                        return Err(CatalogError::DuplicateKey { table, key: key.to_string() });
                    }
                }
            }
        }

        let path = self.journal_path(table);
        let mut file = OpenOptions::new().read(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut buf = Vec::new();
        if !ends_with_newline(&mut file).map_err(io_err(&path))? {
            // Terminate a torn trailing line so the new records start clean.
            buf.push(b'\n');
        }
        for record in records {
            serde_json::to_writer(&mut buf, record).map_err(|source| CatalogError::Serialize { table, source })?;
            buf.push(b'\n');
        }
        file.write_all(&buf).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))?;
        Ok(records.len())
    }

    /// Reads every well-formed record of a table in journal order. Malformed
    /// lines are skipped with a warning.
    pub fn read<R: Record>(&self) -> Result<Vec<R>> {
        let scan = self.scan::<R>()?;
        for bad in &scan.malformed {
            log::warn!("{} line {}: skipped ({})", bad.table, bad.line, bad.reason);
        }
        Ok(scan.records.into_iter().map(|(_, r)| r).collect())
    }

    pub fn count(&self, table: Table) -> Result<usize> {
        Ok(match table {
            Table::Assets => self.scan::<MediaAsset>()?.records.len(),
            Table::Detections => self.scan::<Detection>()?.records.len(),
            Table::Events => self.scan::<Event>()?.records.len(),
            Table::Labels => self.scan::<LabelRecord>()?.records.len(),
            Table::Transfers => self.scan::<TransferRecord>()?.records.len(),
        })
    }

    /// Assets matching `filter`, sorted by `(site_id, captured_at, asset_id)`.
    pub fn query_assets(&self, filter: &AssetFilter) -> Result<Vec<MediaAsset>> {
        let mut assets: Vec<MediaAsset> =
            self.read::<MediaAsset>()?.into_iter().filter(|a| filter.matches(a)).collect();
        sort_assets(&mut assets);
        Ok(assets)
    }

    pub fn assets(&self) -> Result<Vec<MediaAsset>> {
        self.query_assets(&AssetFilter::default())
    }

    pub fn detections(&self) -> Result<Vec<Detection>> {
        self.read()
    }

    pub fn labels(&self) -> Result<Vec<LabelRecord>> {
        self.read()
    }

    pub fn transfers(&self) -> Result<Vec<TransferRecord>> {
        self.read()
    }

    /// Events of the most recent grouping run.
    pub fn events(&self) -> Result<Vec<Event>> {
        let all: Vec<Event> = self.read()?;
        let latest = all.iter().map(|e| e.run).max();
        Ok(all.into_iter().filter(|e| Some(e.run) == latest).collect())
    }

    pub fn all_events(&self) -> Result<Vec<Event>> {
        self.read()
    }

    /// Asset ids already present in the catalog.
    pub fn asset_ids(&self) -> Result<BTreeSet<String>> {
        Ok(self.read::<MediaAsset>()?.into_iter().map(|a| a.asset_id).collect())
    }

    pub fn integrity_check(&self) -> Result<IntegrityReport> {
        let mut report = IntegrityReport::default();

        let assets = self.scan::<MediaAsset>()?;
        report.malformed_lines.extend(assets.malformed);
        let mut known = HashSet::new();
        for (_, asset) in &assets.records {
            if !known.insert(asset.asset_id.clone()) {
                report.duplicate_keys.push((Table::Assets, asset.asset_id.clone()));
            }
        }

        let detections = self.scan::<Detection>()?;
        report.malformed_lines.extend(detections.malformed);
        for (_, det) in &detections.records {
            if !known.contains(&det.asset_id) {
                report.orphans.push(Orphan { table: Table::Detections, asset_id: det.asset_id.clone() });
            }
        }

        let events = self.scan::<Event>()?;
        report.malformed_lines.extend(events.malformed);
        let mut event_ids = HashSet::new();
        for (_, event) in &events.records {
            if !event_ids.insert(event.event_id.clone()) {
                report.duplicate_keys.push((Table::Events, event.event_id.clone()));
            }
            for member in &event.member_asset_ids {
                if !known.contains(member) {
                    report.orphans.push(Orphan { table: Table::Events, asset_id: member.clone() });
                }
            }
        }

        let labels = self.scan::<LabelRecord>()?;
        report.malformed_lines.extend(labels.malformed);
        for (_, label) in &labels.records {
            if let Some(id) = &label.asset_id {
                if !known.contains(id) {
                    report.orphans.push(Orphan { table: Table::Labels, asset_id: id.clone() });
                }
            }
        }

        let transfers = self.scan::<TransferRecord>()?;
        report.malformed_lines.extend(transfers.malformed);
        let mut transfer_ids = HashSet::new();
        for (_, t) in &transfers.records {
            if !transfer_ids.insert(t.transfer_id.clone()) {
                report.duplicate_keys.push((Table::Transfers, t.transfer_id.clone()));
            }
        }
        Ok(report)
    }

    /// Per-table record counts.
    pub fn table_counts(&self) -> Result<BTreeMap<Table, usize>> {
        let mut out = BTreeMap::new();
        for table in Table::ALL {
            out.insert(table, self.count(table)?);
        }
        Ok(out)
    }

    fn scan<R: Record>(&self) -> Result<Scan<R>> {
        let table = R::TABLE;
        let path = self.journal_path(table);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut records = Vec::new();
        let mut malformed = Vec::new();
        let complete = bytes.last().is_none_or(|&b| b == b'\n');
        let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
        // `split` yields a trailing empty slice after the final newline.
        if complete {
            lines.pop();
        }
        let last = lines.len();
        for (idx, line) in lines.into_iter().enumerate() {
            let line_no = idx + 1;
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            if !complete && line_no == last {
                malformed.push(MalformedLine { table, line: line_no, reason: "truncated final line".into() });
                continue;
            }
            let parsed = std::str::from_utf8(line)
                .map_err(|e| e.to_string())
                .and_then(|text| serde_json::from_str::<R>(text).map_err(|e| e.to_string()));
            match parsed {
                Ok(record) => records.push((line_no, record)),
                Err(reason) => malformed.push(MalformedLine { table, line: line_no, reason }),
            }
        }
        Ok(Scan { records, malformed })
    }

    fn lock(&self) -> Result<WriterLock> {
        let path = self.root.join(LOCK_FILE);
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(io_err(&path))?;
        match file.try_lock() {
            Ok(()) => Ok(WriterLock { file }),
            Err(fs::TryLockError::WouldBlock) => Err(CatalogError::Locked(path)),
            Err(fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
        }
    }
}

struct WriterLock {
    file: File,
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// Holds the writer lock across several appends. Appends issued through the
/// catalog while this guard is alive from another handle fail with
/// [`CatalogError::Locked`].
pub struct ExclusiveWriter {
    _lock: WriterLock,
}

impl Catalog {
    pub fn exclusive(&self) -> Result<ExclusiveWriter> {
        Ok(ExclusiveWriter { _lock: self.lock()? })
    }
}

pub fn sort_assets(assets: &mut [MediaAsset]) {
    assets.sort_by(|a, b| (&a.site_id, a.captured_at, &a.asset_id).cmp(&(&b.site_id, b.captured_at, &b.asset_id)));
}

fn ends_with_newline(file: &mut File) -> io::Result<bool> {
    let len = file.seek(SeekFrom::End(0))?;
    if len == 0 {
        return Ok(true);
    }
    file.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    file.read_exact(&mut last)?;
    Ok(last[0] == b'\n')
}

fn write_new_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = OpenOptions::new().create_new(true).write(true).open(path).map_err(io_err(path))?;
    file.write_all(bytes).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 5, 3).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    fn asset(id: &str, site: &str, at: NaiveDateTime) -> MediaAsset {
        let checksum = format!("{:0>64}", id);
        MediaAsset {
            asset_id: checksum.clone(),
            site_id: site.into(),
            session_id: "3May2024".into(),
            relative_path: format!("{site}/{id}.jpg"),
            kind: MediaKind::Image,
            captured_at: at,
            timestamp_source: TimestampSource::EmbeddedMetadata,
            size_bytes: 10,
            checksum,
            temperature_c: None,
        }
    }

    #[test]
    fn fresh_catalog_has_five_empty_journals() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        for table in Table::ALL {
            let path = cat.journal_path(table);
            assert!(path.exists());
            assert_eq!(fs::metadata(path).unwrap().len(), 0);
        }
        let meta = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert_eq!(kv::parse_map(&meta).unwrap()["format_version"], "1");
    }

    #[test]
    fn reopen_sees_existing_records_and_leaves_files_alone() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        cat.append(&[asset("a", "S01", ts(1, 0)), asset("b", "S01", ts(2, 0)), asset("c", "S02", ts(3, 0))]).unwrap();
        let meta_before = fs::read(dir.path().join(META_FILE)).unwrap();
        let journal_before = fs::read(cat.journal_path(Table::Assets)).unwrap();
        let reopened = Catalog::open(dir.path()).unwrap();
        assert_eq!(reopened.count(Table::Assets).unwrap(), 3);
        assert_eq!(fs::read(dir.path().join(META_FILE)).unwrap(), meta_before);
        assert_eq!(fs::read(cat.journal_path(Table::Assets)).unwrap(), journal_before);
        assert_eq!(reopened.assets().unwrap(), cat.assets().unwrap());
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(META_FILE), "format_version=99\n").unwrap();
        assert!(matches!(Catalog::open(dir.path()), Err(CatalogError::UnsupportedVersion(99))));
    }

    #[test]
    fn append_validates_and_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        assert_eq!(cat.append(&[asset("a", "S01", ts(1, 0)), asset("b", "S01", ts(1, 1))]).unwrap(), 2);

        let mut bad = asset("z", "S01", ts(1, 0));
        bad.size_bytes = 0;
        match cat.append(&[bad, asset("y", "S01", ts(1, 0))]) {
            Err(CatalogError::Invalid { index: 0, table: Table::Assets, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(cat.count(Table::Assets).unwrap(), 2, "failed call appended nothing");
    }

    #[test]
    fn duplicate_asset_names_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        let a = asset("a", "S01", ts(1, 0));
        cat.append(std::slice::from_ref(&a)).unwrap();
        match cat.append(std::slice::from_ref(&a)) {
            Err(CatalogError::DuplicateKey { key, .. }) => assert_eq!(key, a.checksum),
            other => panic!("unexpected {other:?}"),
        }
        // Duplicates inside one call are rejected too.
        let b = asset("b", "S01", ts(1, 0));
        assert!(cat.append(&[b.clone(), b]).is_err());
        assert_eq!(cat.count(Table::Assets).unwrap(), 1);
    }

    #[test]
    fn query_filters_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        assert!(cat.query_assets(&AssetFilter::default()).unwrap().is_empty());
        cat.append(&[asset("a", "A", ts(5, 0)), asset("b", "B", ts(1, 0)), asset("c", "A", ts(2, 0))]).unwrap();
        let site_a = cat.query_assets(&AssetFilter { site_id: Some("A".into()), ..Default::default() }).unwrap();
        assert_eq!(site_a.len(), 2);
        assert!(site_a[0].captured_at < site_a[1].captured_at);

        let none = cat
            .query_assets(&AssetFilter {
                time_range: Some(TimeRange { start: ts(20, 0), end: ts(21, 0) }),
                ..Default::default()
            })
            .unwrap();
        assert!(none.is_empty());

        let all = cat.assets().unwrap();
        let sites: Vec<_> = all.iter().map(|a| a.site_id.as_str()).collect();
        assert_eq!(sites, ["A", "A", "B"]);
    }

    #[test]
    fn integrity_reports_orphans_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        let a = asset("a", "S01", ts(1, 0));
        cat.append(&[a.clone(), asset("b", "S01", ts(1, 5))]).unwrap();
        assert!(cat.integrity_check().unwrap().is_empty());

        cat.append(&[Detection {
            asset_id: "f".repeat(64),
            category: Category::Animal,
            confidence: 0.5,
            bbox: BoundingBox::new(0.1, 0.1, 0.2, 0.2),
        }])
        .unwrap();
        let report = cat.integrity_check().unwrap();
        assert_eq!(report.orphans.len(), 1);
        assert!(report.malformed_lines.is_empty());

        // Truncate the asset journal in the middle of its last record.
        let path = cat.journal_path(Table::Assets);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        let report = cat.integrity_check().unwrap();
        assert_eq!(report.malformed_lines.len(), 1);
        assert_eq!(report.malformed_lines[0].line, 2);
        assert_eq!(cat.assets().unwrap(), vec![a]);
    }

    #[test]
    fn append_after_torn_line_starts_on_fresh_line() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        cat.append(&[asset("a", "S01", ts(1, 0))]).unwrap();
        let path = cat.journal_path(Table::Assets);
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(b"{\"asset_id\":\"tor");
        fs::write(&path, &bytes).unwrap();
        cat.append(&[asset("b", "S01", ts(1, 1))]).unwrap();
        assert_eq!(cat.assets().unwrap().len(), 2);
        let after = fs::read(&path).unwrap();
        assert!(after.starts_with(&bytes), "append-only prefix property");
        let report = cat.integrity_check().unwrap();
        assert_eq!(report.malformed_lines.len(), 1);
    }

    #[test]
    fn exclusive_writer_blocks_other_appends() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        let other = Catalog::open(dir.path()).unwrap();
        let guard = cat.exclusive().unwrap();
        assert!(matches!(other.append(&[asset("a", "S01", ts(1, 0))]), Err(CatalogError::Locked(_))));
        drop(guard);
        other.append(&[asset("a", "S01", ts(1, 0))]).unwrap();
    }

    #[test]
    fn events_returns_latest_run() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        let a = asset("a", "S01", ts(1, 0));
        let mk = |id: &str, run| Event {
            event_id: id.into(),
            run,
            site_id: "S01".into(),
            member_asset_ids: vec![a.asset_id.clone()],
            start_at: a.captured_at,
            end_at: a.captured_at,
            representative_asset_id: a.asset_id.clone(),
            species: None,
            individual_count: 1,
        };
        cat.append(&[mk("E1", 1)]).unwrap();
        cat.append(&[mk("E2", 2)]).unwrap();
        let latest = cat.events().unwrap();
        assert_eq!(latest.len(), 1);
        assert_eq!(latest[0].event_id, "E2");
        assert_eq!(cat.all_events().unwrap().len(), 2);
    }
}
