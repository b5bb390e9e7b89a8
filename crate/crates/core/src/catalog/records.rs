//! Record types stored in the catalog journals.
//!
//! Field names are serialized verbatim (lower_snake_case); these names are
//! the on-disk journal schema.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

/// Tolerance applied to bounding boxes and confidences that drift just
/// outside `[0, 1]` through float round trips.
pub const UNIT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Assets,
    Detections,
    Events,
    Labels,
    Transfers,
}

impl Table {
    pub const ALL: [Table; 5] = [Table::Assets, Table::Detections, Table::Events, Table::Labels, Table::Transfers];

    pub fn name(self) -> &'static str {
        match self {
            Table::Assets => "assets",
            Table::Detections => "detections",
            Table::Events => "events",
            Table::Labels => "labels",
            Table::Transfers => "transfers",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A type that lives in one catalog journal.
pub trait Record: Serialize + for<'de> Deserialize<'de> + Clone {
    const TABLE: Table;

    /// Primary key, for tables that have one.
    fn primary_key(&self) -> Option<&str> {
        None
    }

    fn validate(&self) -> Result<(), String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Video,
}

impl fmt::Display for MediaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MediaKind::Image => "image",
            MediaKind::Video => "video",
        })
    }
}

impl FromStr for MediaKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(MediaKind::Image),
            "video" => Ok(MediaKind::Video),
            other => Err(format!("unknown media kind {other:?}")),
        }
    }
}

/// Where an asset's capture time came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampSource {
    EmbeddedMetadata,
    FilenamePattern,
    FileMtime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaAsset {
    pub asset_id: String,
    pub site_id: String,
    pub session_id: String,
    /// Path within the session folder, `/`-separated, starting with the site folder.
    pub relative_path: String,
    pub kind: MediaKind,
    pub captured_at: NaiveDateTime,
    pub timestamp_source: TimestampSource,
    pub size_bytes: u64,
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_c: Option<i32>,
}

impl MediaAsset {
    /// File name component of `relative_path`.
    pub fn file_name(&self) -> &str {
        self.relative_path.rsplit_once('/').map(|(_, f)| f).unwrap_or(&self.relative_path)
    }

    /// Directory of the asset relative to the dataset root: `<session>/<dirs>`.
    pub fn root_relative_dir(&self) -> String {
        match self.relative_path.rsplit_once('/') {
            Some((dir, _)) => format!("{}/{}", self.session_id, dir),
            None => self.session_id.clone(),
        }
    }

    /// Path relative to the dataset root: `<session>/<relative_path>`.
    pub fn root_relative_path(&self) -> String {
        format!("{}/{}", self.session_id, self.relative_path)
    }
}

impl Record for MediaAsset {
    const TABLE: Table = Table::Assets;

    fn primary_key(&self) -> Option<&str> {
        Some(&self.asset_id)
    }

    fn validate(&self) -> Result<(), String> {
        if self.size_bytes == 0 {
            return Err("size_bytes must be > 0".into());
        }
        if self.asset_id != self.checksum {
            return Err(format!("asset_id {} differs from checksum {}", self.asset_id, self.checksum));
        }
        if self.checksum.is_empty() || !self.checksum.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("checksum {:?} is not a hex digest", self.checksum));
        }
        if self.site_id.is_empty() || self.session_id.is_empty() || self.relative_path.is_empty() {
            return Err("site_id, session_id and relative_path must be non-empty".into());
        }
        Ok(())
    }
}

/// Detection categories of the batch format: animal=1, person=2, vehicle=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Animal = 1,
    Person = 2,
    Vehicle = 3,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Animal, Category::Person, Category::Vehicle];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Category> {
        match id {
            1 => Some(Category::Animal),
            2 => Some(Category::Person),
            3 => Some(Category::Vehicle),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Animal => "animal",
            Category::Person => "person",
            Category::Vehicle => "vehicle",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Normalized `(x, y, w, h)` rectangle, serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BoundingBox { x, y, w, h }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Clamps `value` into `[0, 1]` when it lies outside by at most [`UNIT_EPSILON`].
pub fn clamp_unit(value: f64, what: &str) -> Result<f64, String> {
    if !value.is_finite() {
        return Err(format!("{what} is not finite"));
    }
    if !(-UNIT_EPSILON..=1.0 + UNIT_EPSILON).contains(&value) {
        return Err(format!("{what} {value} outside [0, 1]"));
    }
    Ok(value.clamp(0.0, 1.0))
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    /// Returns the box with sub-epsilon excursions clamped, or an error for
    /// anything larger.
    pub fn clamped(self) -> Result<BoundingBox, String> {
        let x = clamp_unit(self.x, "bbox x")?;
        let y = clamp_unit(self.y, "bbox y")?;
        let mut w = clamp_unit(self.w, "bbox w")?;
        let mut h = clamp_unit(self.h, "bbox h")?;
        if x + w > 1.0 + UNIT_EPSILON {
            return Err(format!("bbox x + w = {} exceeds 1", x + w));
        }
        if y + h > 1.0 + UNIT_EPSILON {
            return Err(format!("bbox y + h = {} exceeds 1", y + h));
        }
        if x + w > 1.0 {
            w = 1.0 - x;
        }
        if y + h > 1.0 {
            h = 1.0 - y;
        }
        Ok(BoundingBox { x, y, w, h })
    }

    fn check(&self) -> Result<(), String> {
        for (v, what) in [(self.x, "x"), (self.y, "y"), (self.w, "w"), (self.h, "h")] {
            if !v.is_finite() || !(0.0..=1.0 + UNIT_EPSILON).contains(&v) {
                return Err(format!("bbox {what} {v} outside [0, 1]"));
            }
        }
        if self.x + self.w > 1.0 + UNIT_EPSILON || self.y + self.h > 1.0 + UNIT_EPSILON {
            return Err("bbox extends beyond the image".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub asset_id: String,
    pub category: Category,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

impl Record for Detection {
    const TABLE: Table = Table::Detections;

    fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        self.bbox.check()?;
        if self.asset_id.is_empty() {
            return Err("asset_id must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    /// Grouping run that produced this event. Re-grouping appends a new run.
    #[serde(default)]
    pub run: u32,
    pub site_id: String,
    pub member_asset_ids: Vec<String>,
    pub start_at: NaiveDateTime,
    pub end_at: NaiveDateTime,
    pub representative_asset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<String>,
    pub individual_count: u32,
}

impl Record for Event {
    const TABLE: Table = Table::Events;

    fn primary_key(&self) -> Option<&str> {
        Some(&self.event_id)
    }

    fn validate(&self) -> Result<(), String> {
        if self.member_asset_ids.is_empty() {
            return Err("event has no members".into());
        }
        if !self.member_asset_ids.contains(&self.representative_asset_id) {
            return Err(format!("representative {} is not a member", self.representative_asset_id));
        }
        if self.end_at < self.start_at {
            return Err("end_at precedes start_at".into());
        }
        Ok(())
    }
}

/// Flags with pipeline meaning. Labelers may add any other string.
pub mod flags {
    pub const UNKNOWN: &str = "unknown";
    pub const HUMAN: &str = "human";
    pub const BIRD: &str = "bird";
    pub const EMPTY: &str = "empty";
}

/// One human annotation row, the unit exchanged with the labeling tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    /// Resolved catalog asset; `None` until matched by path.
    #[serde(default)]
    pub asset_id: Option<String>,
    #[serde(default)]
    pub event_id: Option<String>,
    /// File name (`File` column).
    pub file: String,
    /// Folder relative to the dataset root (`RelativePath` column).
    pub relative_path: String,
    #[serde(default)]
    pub site_id: Option<String>,
    #[serde(default)]
    pub captured_at: Option<NaiveDateTime>,
    pub species: String,
    pub count: u32,
    #[serde(default)]
    pub temperature_c: Option<i32>,
    #[serde(default)]
    pub max_confidence: Option<f64>,
    #[serde(default)]
    pub representative: bool,
    pub annotator: String,
    #[serde(default)]
    pub labeled_at: Option<NaiveDateTime>,
    #[serde(default)]
    pub flags: BTreeSet<String>,
}

impl LabelRecord {
    /// `RelativePath/File`, the key used to match labels to assets.
    pub fn root_relative_path(&self) -> String {
        if self.relative_path.is_empty() {
            self.file.clone()
        } else {
            format!("{}/{}", self.relative_path.trim_end_matches('/'), self.file)
        }
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.contains(flag)
    }

    /// True when the row asserts at least one animal in the image.
    pub fn animal_present(&self) -> bool {
        self.count > 0 && !self.has_flag(flags::HUMAN) && !self.has_flag(flags::EMPTY) && !self.has_flag(flags::UNKNOWN)
    }
}

impl Record for LabelRecord {
    const TABLE: Table = Table::Labels;

    fn validate(&self) -> Result<(), String> {
        if self.species.trim().is_empty() && !self.has_flag(flags::UNKNOWN) {
            return Err("species is empty and the record is not flagged unknown".into());
        }
        if self.file.is_empty() {
            return Err("file must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    CardImport,
    RemoteUpload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferOutcome {
    Ok,
    Failed,
    RetriedOk,
}

impl TransferOutcome {
    pub fn succeeded(self) -> bool {
        matches!(self, TransferOutcome::Ok | TransferOutcome::RetriedOk)
    }
}

/// One copy or upload job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub transfer_id: String,
    pub kind: TransferKind,
    pub payload_path: String,
    pub bytes: u64,
    pub started_at: NaiveDateTime,
    pub finished_at: NaiveDateTime,
    pub outcome: TransferOutcome,
    pub attempts: u32,
}

impl TransferRecord {
    pub fn duration_millis(&self) -> i64 {
        (self.finished_at - self.started_at).num_milliseconds()
    }
}

impl Record for TransferRecord {
    const TABLE: Table = Table::Transfers;

    fn primary_key(&self) -> Option<&str> {
        Some(&self.transfer_id)
    }

    fn validate(&self) -> Result<(), String> {
        if self.finished_at < self.started_at {
            return Err("finished_at precedes started_at".into());
        }
        if self.attempts == 0 {
            return Err("attempts must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_clamps_within_epsilon() {
        let b = BoundingBox::new(-5e-7, 0.0, 0.5, 1.0 + 5e-7).clamped().unwrap();
        assert_eq!(b.x, 0.0);
        assert_eq!(b.h, 1.0);
        let b = BoundingBox::new(0.6, 0.0, 0.4 + 5e-7, 0.5).clamped().unwrap();
        assert!(b.x + b.w <= 1.0);
    }

    #[test]
    fn bbox_rejects_large_violation() {
        assert!(BoundingBox::new(-0.01, 0.0, 0.5, 0.5).clamped().is_err());
        assert!(BoundingBox::new(0.7, 0.0, 0.5, 0.5).clamped().is_err());
    }

    #[test]
    fn bbox_serializes_as_array() {
        let json = serde_json::to_string(&BoundingBox::new(0.1, 0.2, 0.3, 0.4)).unwrap();
        assert_eq!(json, "[0.1,0.2,0.3,0.4]");
    }

    #[test]
    fn category_ids() {
        for c in Category::ALL {
            assert_eq!(Category::from_id(c.id()), Some(c));
            assert_eq!(Category::from_name(c.name()), Some(c));
        }
        assert_eq!(Category::Animal.id(), 1);
        assert_eq!(Category::Vehicle.id(), 3);
    }

    #[test]
    fn label_species_rule() {
        let mut label = LabelRecord {
            asset_id: None,
            event_id: None,
            file: "a.jpg".into(),
            relative_path: "3May2024/S01".into(),
            site_id: None,
            captured_at: None,
            species: String::new(),
            count: 0,
            temperature_c: None,
            max_confidence: None,
            representative: false,
            annotator: "x".into(),
            labeled_at: None,
            flags: BTreeSet::new(),
        };
        assert!(label.validate().is_err());
        label.flags.insert(flags::UNKNOWN.into());
        assert!(label.validate().is_ok());
        assert_eq!(label.root_relative_path(), "3May2024/S01/a.jpg");
    }
}
