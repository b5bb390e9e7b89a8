//! Timelapse-compatible CSV exchange and dataset cleaning.
//!
//! The CSV dialect has a fixed header
//! `File,RelativePath,DateTime,EventID,Species,Count,TemperatureC,MaxConfidence,Representative`,
//! RFC 4180 quoting, UTF-8 and LF line endings. `DateTime` is
//! `YYYY-MM-DD HH:MM:SS`. Columns beyond the header are accepted on import
//! and kept as `Name=value` flags on the record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::Serialize;

use crate::catalog::{flags, Catalog, CatalogError, Event, LabelRecord, MediaAsset};
use crate::detect::batch::round_float;
use crate::events::Observation;
use crate::ingest::parse_session_folder_name;

pub const HEADER: [&str; 9] = [
    "File",
    "RelativePath",
    "DateTime",
    "EventID",
    "Species",
    "Count",
    "TemperatureC",
    "MaxConfidence",
    "Representative",
];
pub const MANDATORY: [&str; 4] = ["File", "DateTime", "Species", "Count"];
pub const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const DEFAULT_ANNOTATOR: &str = "timelapse";
/// Optional import column holding `;`-separated labeler flags.
pub const FLAGS_COLUMN: &str = "Flags";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing mandatory column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

pub fn format_datetime(t: NaiveDateTime) -> String {
    t.format(DATETIME_FORMAT).to_string()
}

pub fn parse_datetime(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y:%m:%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())
}

/// Shortest decimal of the value rounded to five places.
pub fn format_confidence(v: f64) -> String {
    format!("{}", round_float(v))
}

fn record_fields(r: &LabelRecord) -> [String; 9] {
    [
        r.file.clone(),
        r.relative_path.clone(),
        r.captured_at.map(format_datetime).unwrap_or_default(),
        r.event_id.clone().unwrap_or_default(),
        r.species.clone(),
        r.count.to_string(),
        r.temperature_c.map(|t| t.to_string()).unwrap_or_default(),
        r.max_confidence.map(format_confidence).unwrap_or_default(),
        r.representative.to_string(),
    ]
}

/// Writes records as CSV rows under the fixed header. Returns the row count.
pub fn write_timelapse_csv<W: Write>(records: &[LabelRecord], out: W) -> Result<usize, ExportError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out);
    writer.write_record(HEADER)?;
    for r in records {
        writer.write_record(record_fields(r))?;
    }
    writer.flush().map_err(|source| ExportError::Io { path: "<csv>".into(), source })?;
    Ok(records.len())
}

pub fn write_timelapse_csv_file(records: &[LabelRecord], path: &Path) -> Result<usize, ExportError> {
    let file = File::create(path).map_err(|source| ExportError::Io { path: path.display().to_string(), source })?;
    write_timelapse_csv(records, io::BufWriter::new(file))
}

/// One row per event member, in event order then member order.
pub fn event_rows(assets: &[MediaAsset], events: &[Event], observations: &[Observation]) -> Vec<LabelRecord> {
    let assets: HashMap<&str, &MediaAsset> = assets.iter().map(|a| (a.asset_id.as_str(), a)).collect();
    let obs: HashMap<&str, &Observation> = observations.iter().map(|o| (o.asset_id.as_str(), o)).collect();
    let mut rows = Vec::new();
    for event in events {
        for member in &event.member_asset_ids {
            let asset = assets.get(member.as_str());
            let o = obs.get(member.as_str());
            let species = o.and_then(|o| o.species.clone()).or_else(|| event.species.clone()).unwrap_or_default();
            let mut record_flags = BTreeSet::new();
            if species.is_empty() {
                record_flags.insert(flags::UNKNOWN.to_string());
            }
            rows.push(LabelRecord {
                asset_id: Some(member.clone()),
                event_id: Some(event.event_id.clone()),
                file: asset.map_or_else(|| member.clone(), |a| a.file_name().to_string()),
                relative_path: asset.map(|a| a.root_relative_dir()).unwrap_or_default(),
                site_id: Some(event.site_id.clone()),
                captured_at: asset.map(|a| a.captured_at),
                species,
                count: o.map_or(0, |o| o.animal_count),
                temperature_c: asset.and_then(|a| a.temperature_c),
                max_confidence: o.map(|o| o.max_animal_confidence),
                representative: *member == event.representative_asset_id,
                annotator: DEFAULT_ANNOTATOR.into(),
                labeled_at: None,
                flags: record_flags,
            });
        }
    }
    rows
}

/// Exports finalized events as a Timelapse table at `path`.
pub fn export_timelapse_csv(
    catalog: &Catalog,
    events: &[Event],
    observations: &[Observation],
    path: &Path,
) -> Result<usize, ExportError> {
    let assets = catalog.assets()?;
    write_timelapse_csv_file(&event_rows(&assets, events, observations), path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowIssue {
    /// 1-based data row (the header is row 0).
    pub row: usize,
    pub column: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LabelImport {
    pub records: Vec<LabelRecord>,
    pub issues: Vec<RowIssue>,
}

/// Site folder implied by a `RelativePath`: the component after a leading
/// session folder, otherwise the first component.
pub fn site_from_relative_path(relative_path: &str) -> Option<String> {
    let mut parts = relative_path.split('/').filter(|p| !p.is_empty());
    let first = parts.next()?;
    if parse_session_folder_name(first).is_some() {
        parts.next().map(str::to_string)
    } else {
        Some(first.to_string())
    }
}

fn derived_flags(species: &str) -> impl Iterator<Item = &'static str> {
    let s = species.trim().to_ascii_lowercase();
    let flag = match s.as_str() {
        "" | "unknown" => Some(flags::UNKNOWN),
        "human" | "person" => Some(flags::HUMAN),
        "empty" | "blank" => Some(flags::EMPTY),
        "bird" => Some(flags::BIRD),
        _ => None,
    };
    flag.into_iter()
}

pub fn read_timelapse_csv<R: io::Read>(input: R) -> Result<LabelImport, ExportError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing: Vec<String> = MANDATORY.iter().filter(|m| col(m).is_none()).map(|m| m.to_string()).collect();
    if !missing.is_empty() {
        return Err(ExportError::MissingColumns(missing));
    }
    let known: BTreeSet<&str> = HEADER.iter().copied().chain(["Annotator", FLAGS_COLUMN]).collect();
    let extra_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !known.contains(h.trim()))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut out = LabelImport::default();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.issues.push(RowIssue { row: row_no, column: String::new(), message: e.to_string() });
                continue;
            }
        };
        let get = |name: &str| col(name).and_then(|i| row.get(i)).unwrap_or("").to_string();
        let mut issue = |column: &str, message: String| {
            out.issues.push(RowIssue { row: row_no, column: column.to_string(), message })
        };

        let count_text = get("Count");
        let count = match count_text.trim().parse::<u32>() {
            Ok(c) => c,
            Err(_) => {
                issue("Count", format!("not a non-negative integer: {count_text:?}"));
                continue;
            }
        };
        let dt_text = get("DateTime");
        let captured_at = parse_datetime(&dt_text);
        if captured_at.is_none() {
            issue("DateTime", format!("unparseable datetime {dt_text:?}"));
        }
        let temperature_c = match get("TemperatureC").trim() {
            "" => None,
            t => match t.parse::<i32>() {
                Ok(v) => Some(v),
                Err(_) => {
                    issue("TemperatureC", format!("not an integer: {t:?}"));
                    None
                }
            },
        };
        let max_confidence = match get("MaxConfidence").trim() {
            "" => None,
            t => match t.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Some(v),
                _ => {
                    issue("MaxConfidence", format!("not a confidence in [0, 1]: {t:?}"));
                    None
                }
            },
        };
        let representative = get("Representative").trim().eq_ignore_ascii_case("true");
        let species = get("Species").trim().to_string();
        let relative_path = get("RelativePath").trim().replace('\\', "/");

        let mut record_flags: BTreeSet<String> = derived_flags(&species).map(str::to_string).collect();
        for f in get(FLAGS_COLUMN).split(';').map(str::trim).filter(|f| !f.is_empty()) {
            record_flags.insert(f.to_ascii_lowercase());
        }
        for (i, name) in &extra_cols {
            if let Some(v) = row.get(*i).filter(|v| !v.is_empty()) {
                record_flags.insert(format!("{name}={v}"));
            }
        }
        let annotator = match get("Annotator").trim() {
            "" => DEFAULT_ANNOTATOR.to_string(),
            a => a.to_string(),
        };
        let event_id = Some(get("EventID").trim().to_string()).filter(|e| !e.is_empty());

        out.records.push(LabelRecord {
            asset_id: None,
            event_id,
            file: get("File"),
            site_id: site_from_relative_path(&relative_path),
            relative_path,
            captured_at,
            species,
            count,
            temperature_c,
            max_confidence,
            representative,
            annotator,
            labeled_at: None,
            flags: record_flags,
        });
    }
    Ok(out)
}

pub fn import_timelapse_csv(path: &Path) -> Result<LabelImport, ExportError> {
    let file = File::open(path).map_err(|source| ExportError::Io { path: path.display().to_string(), source })?;
    read_timelapse_csv(io::BufReader::new(file))
}

/// Fills `asset_id` (and `site_id`) by matching `RelativePath/File` to
/// asset paths, falling back to a file name that is unique in the catalog.
/// Returns the indices of records that matched nothing.
pub fn resolve_labels(records: &mut [LabelRecord], assets: &[MediaAsset]) -> Vec<usize> {
    let by_path: HashMap<String, &MediaAsset> = assets.iter().map(|a| (a.root_relative_path(), a)).collect();
    let mut by_name: HashMap<&str, Option<&MediaAsset>> = HashMap::new();
    for a in assets {
        by_name.entry(a.file_name()).and_modify(|slot| *slot = None).or_insert(Some(a));
    }
    let mut unresolved = Vec::new();
    for (i, r) in records.iter_mut().enumerate() {
        let hit =
            by_path.get(&r.root_relative_path()).copied().or_else(|| by_name.get(r.file.as_str()).copied().flatten());
        match hit {
            Some(asset) => {
                r.asset_id = Some(asset.asset_id.clone());
                r.site_id = Some(asset.site_id.clone());
            }
            None => unresolved.push(i),
        }
    }
    unresolved
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleaningPolicy {
    /// Lower-case flags or species names that cause removal.
    pub remove_flags: BTreeSet<String>,
    /// Lower-case species kept even when they match `remove_flags`.
    pub keep_species: BTreeSet<String>,
    /// Seconds added to each record's capture time, per site.
    pub datetime_offsets: BTreeMap<String, i64>,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            remove_flags: [flags::HUMAN, flags::UNKNOWN, flags::BIRD].iter().map(|s| s.to_string()).collect(),
            keep_species: ["wild turkey".to_string()].into(),
            datetime_offsets: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CleaningOutcome {
    pub kept: Vec<LabelRecord>,
    /// Removed record counts keyed by the flag that matched.
    pub removed: BTreeMap<String, usize>,
}

/// Drops records whose flags or species match `remove_flags`, unless the
/// species is on the keep list. Order of survivors is preserved.
pub fn apply_cleaning(records: &[LabelRecord], policy: &CleaningPolicy) -> CleaningOutcome {
    let mut outcome = CleaningOutcome::default();
    for r in records {
        let species = r.species.trim().to_ascii_lowercase();
        let matched = if policy.keep_species.contains(&species) {
            None
        } else {
            policy.remove_flags.iter().find(|f| r.flags.contains(*f) || species == **f)
        };
        match matched {
            Some(flag) => *outcome.removed.entry(flag.clone()).or_default() += 1,
            None => outcome.kept.push(r.clone()),
        }
    }
    outcome
}

/// Shifts capture times by the per-site offset and re-sorts by
/// `(site, capture time)`. Not idempotent unless all offsets are zero.
pub fn clean_datetimes(records: &[LabelRecord], policy: &CleaningPolicy) -> Vec<LabelRecord> {
    let sites: BTreeSet<&str> = records.iter().filter_map(|r| r.site_id.as_deref()).collect();
    for site in policy.datetime_offsets.keys() {
        if !sites.contains(site.as_str()) {
            log::warn!("datetime offset for unknown site {site:?} ignored");
        }
    }
    let mut out: Vec<LabelRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            let offset = r.site_id.as_ref().and_then(|s| policy.datetime_offsets.get(s)).copied().unwrap_or(0);
            if offset != 0 {
                r.captured_at = r.captured_at.map(|t| t + chrono::Duration::seconds(offset));
            }
            r
        })
        .collect();
    out.sort_by(|a, b| (&a.site_id, a.captured_at).cmp(&(&b.site_id, b.captured_at)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn label(species: &str, flag: Option<&str>) -> LabelRecord {
        LabelRecord {
            asset_id: None,
            event_id: None,
            file: format!("{species}.jpg"),
            relative_path: "3May2024/S01".into(),
            site_id: Some("S01".into()),
            captured_at: Some(NaiveDate::from_ymd_opt(2024, 5, 3).unwrap().and_hms_opt(10, 0, 0).unwrap()),
            species: species.into(),
            count: 1,
            temperature_c: Some(12),
            max_confidence: Some(0.9),
            representative: false,
            annotator: DEFAULT_ANNOTATOR.into(),
            labeled_at: None,
            flags: flag.into_iter().map(str::to_string).collect(),
        }
    }

    #[test]
    fn header_is_exact() {
        let mut buf = Vec::new();
        assert_eq!(write_timelapse_csv(&[], &mut buf).unwrap(), 0);
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "File,RelativePath,DateTime,EventID,Species,Count,TemperatureC,MaxConfidence,Representative\n"
        );
    }

    #[test]
    fn quoting_round_trips() {
        let r = label("O'Brien's deer, rare", None);
        let mut buf = Vec::new();
        write_timelapse_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"O'Brien's deer, rare\""));
        assert!(!text.contains('\r'));
        let back = read_timelapse_csv(buf.as_slice()).unwrap();
        assert!(back.issues.is_empty());
        assert_eq!(back.records[0].species, r.species);
        assert_eq!(back.records[0].captured_at, r.captured_at);
        assert_eq!(back.records[0].site_id.as_deref(), Some("S01"));
    }

    #[test]
    fn bad_count_is_a_row_issue() {
        let csv =
            "File,DateTime,Species,Count\na.jpg,2024-05-03 10:00:00,deer,three\nb.jpg,2024-05-03 10:00:00,deer,2\n";
        let imported = read_timelapse_csv(csv.as_bytes()).unwrap();
        assert_eq!(imported.records.len(), 1);
        assert_eq!(imported.records[0].file, "b.jpg");
        assert_eq!(imported.issues.len(), 1);
        assert_eq!(imported.issues[0].row, 1);
        assert_eq!(imported.issues[0].column, "Count");
    }

    #[test]
    fn bad_datetime_is_collected_not_fatal() {
        let csv = "File,DateTime,Species,Count\na.jpg,yesterday,deer,1\n";
        let imported = read_timelapse_csv(csv.as_bytes()).unwrap();
        assert_eq!(imported.records.len(), 1);
        assert_eq!(imported.records[0].captured_at, None);
        assert_eq!(imported.issues[0].column, "DateTime");
    }

    #[test]
    fn extra_columns_become_flags() {
        let csv = "File,DateTime,Species,Count,Notes,Flags\na.jpg,2024-05-03 10:00:00,raven,1,near road,bird\n";
        let imported = read_timelapse_csv(csv.as_bytes()).unwrap();
        let flags = &imported.records[0].flags;
        assert!(flags.contains("Notes=near road"));
        assert!(flags.contains("bird"));
    }

    #[test]
    fn missing_mandatory_columns() {
        match read_timelapse_csv("File,Species\n".as_bytes()) {
            Err(ExportError::MissingColumns(cols)) => assert_eq!(cols, ["DateTime", "Count"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cleaning_defaults() {
        let input = vec![
            label("deer", None),
            label("human", Some(flags::HUMAN)),
            label("unknown", Some(flags::UNKNOWN)),
            label("wild turkey", Some(flags::BIRD)),
            label("raven", Some(flags::BIRD)),
        ];
        let out = apply_cleaning(&input, &CleaningPolicy::default());
        let kept: Vec<_> = out.kept.iter().map(|r| r.species.as_str()).collect();
        assert_eq!(kept, ["deer", "wild turkey"]);
        assert_eq!(out.removed.values().sum::<usize>(), 3);
        assert_eq!(apply_cleaning(&out.kept, &CleaningPolicy::default()).kept, out.kept);

        let none = CleaningPolicy { remove_flags: BTreeSet::new(), ..Default::default() };
        assert_eq!(apply_cleaning(&input, &none).kept, input);

        let mut keep_raven = CleaningPolicy::default();
        keep_raven.keep_species.insert("raven".into());
        assert!(apply_cleaning(&input, &keep_raven).kept.iter().any(|r| r.species == "raven"));
    }

    #[test]
    fn datetime_offsets() {
        let r = label("deer", None);
        let mut policy = CleaningPolicy::default();
        assert_eq!(clean_datetimes(std::slice::from_ref(&r), &policy), vec![r.clone()]);
        policy.datetime_offsets.insert("S01".into(), 3600);
        let shifted = clean_datetimes(std::slice::from_ref(&r), &policy);
        assert_eq!(shifted[0].captured_at.unwrap().format("%H:%M").to_string(), "11:00");

        policy.datetime_offsets.insert("S01".into(), -86_400);
        let back = clean_datetimes(std::slice::from_ref(&r), &policy);
        assert_eq!(back[0].captured_at.unwrap().date(), NaiveDate::from_ymd_opt(2024, 5, 2).unwrap());
        assert_eq!(back[0].relative_path, r.relative_path);
    }

    #[test]
    fn site_paths() {
        assert_eq!(site_from_relative_path("3May2024/S01"), Some("S01".into()));
        assert_eq!(site_from_relative_path("S01/DCIM"), Some("S01".into()));
        assert_eq!(site_from_relative_path(""), None);
    }
}
