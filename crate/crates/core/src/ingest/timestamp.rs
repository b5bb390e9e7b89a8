//! Capture-time extraction.
//!
//! Sources are tried in a fixed order: embedded EXIF, then the file name,
//! then the file's modification time. The first that yields a value wins.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::LazyLock;
use std::time::SystemTime;

use chrono::{DateTime, Datelike, Local, NaiveDate, NaiveDateTime, Timelike};
use regex::Regex;

use crate::catalog::{MediaKind, TimestampSource};

static FULL_STAMP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|\D)(\d{4})(\d{2})(\d{2})_(\d{2})(\d{2})(\d{2})(?:\D|$)").unwrap());
static SHORT_STAMP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d{2})(\d{2})(\d{2})(\d{2})(?:\D|$)").unwrap());

/// Reads `DateTimeOriginal` (or `DateTime`) from the file's EXIF block.
pub fn exif_datetime(path: &Path) -> Option<NaiveDateTime> {
    let file = File::open(path).ok()?;
    let exif = exif::Reader::new().read_from_container(&mut BufReader::new(file)).ok()?;
    for tag in [exif::Tag::DateTimeOriginal, exif::Tag::DateTime] {
        let Some(field) = exif.get_field(tag, exif::In::PRIMARY) else {
            continue;
        };
        if let exif::Value::Ascii(ref parts) = field.value {
            if let Some(dt) = parts.first().and_then(|p| exif::DateTime::from_ascii(p).ok()) {
                let date = NaiveDate::from_ymd_opt(dt.year.into(), dt.month.into(), dt.day.into())?;
                return date.and_hms_opt(dt.hour.into(), dt.minute.into(), dt.second.into());
            }
        }
    }
    None
}

/// Parses a capture time from a file stem.
///
/// Accepts `YYYYMMDD_HHMMSS` anywhere in the stem, or a stem starting with
/// `MMDDhhmm`. The short form carries no year; it is taken from
/// `reference` (usually the file mtime), stepping back a year if that would
/// put the capture more than a day after the reference.
pub fn timestamp_from_filename(stem: &str, reference: NaiveDateTime) -> Option<NaiveDateTime> {
    if let Some(c) = FULL_STAMP.captures(stem) {
        let n = |i: usize| c[i].parse::<u32>().ok();
        let date = NaiveDate::from_ymd_opt(c[1].parse().ok()?, n(2)?, n(3)?)?;
        return date.and_hms_opt(n(4)?, n(5)?, n(6)?);
    }
    if let Some(c) = SHORT_STAMP.captures(stem) {
        let n = |i: usize| c[i].parse::<u32>().ok();
        let (month, day, hour, minute) = (n(1)?, n(2)?, n(3)?, n(4)?);
        let at = |year: i32| NaiveDate::from_ymd_opt(year, month, day)?.and_hms_opt(hour, minute, 0);
        let candidate = at(reference.year())?;
        if candidate > reference + chrono::Duration::days(1) {
            return at(reference.year() - 1);
        }
        return Some(candidate);
    }
    None
}

pub fn system_time_to_local(t: SystemTime) -> NaiveDateTime {
    let local: DateTime<Local> = t.into();
    let naive = local.naive_local();
    naive.with_nanosecond(0).unwrap_or(naive)
}

/// Resolves a capture time following the source precedence.
pub fn extract_timestamp(path: &Path, kind: MediaKind, mtime: SystemTime) -> (NaiveDateTime, TimestampSource) {
    if kind == MediaKind::Image {
        if let Some(t) = exif_datetime(path) {
            return (t, TimestampSource::EmbeddedMetadata);
        }
    }
    let mtime = system_time_to_local(mtime);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    if let Some(t) = timestamp_from_filename(stem, mtime) {
        return (t, TimestampSource::FilenamePattern);
    }
    (mtime, TimestampSource::FileMtime)
}

/// Builds a minimal JPEG whose EXIF block carries `DateTimeOriginal`.
///
/// Used by the synthetic corpus writer and by tests; `payload` lands in a
/// COM segment so files with equal timestamps still differ in content.
pub fn jpeg_with_exif(captured_at: NaiveDateTime, payload: &[u8]) -> Vec<u8> {
    let stamp = format!("{}\0", captured_at.format("%Y:%m:%d %H:%M:%S"));
    debug_assert_eq!(stamp.len(), 20);

    // Little-endian TIFF: IFD0 with one ExifIFD pointer, Exif IFD with one
    // DateTimeOriginal entry whose 20-byte value follows the IFD.
    let mut tiff = Vec::new();
    tiff.extend_from_slice(b"II*\0");
    tiff.extend_from_slice(&8u32.to_le_bytes());
    // IFD0 at 8: 1 entry.
    tiff.extend_from_slice(&1u16.to_le_bytes());
    tiff.extend_from_slice(&0x8769u16.to_le_bytes()); // ExifIFDPointer
    tiff.extend_from_slice(&4u16.to_le_bytes()); // LONG
    tiff.extend_from_slice(&1u32.to_le_bytes());
    let exif_ifd_offset: u32 = 8 + 2 + 12 + 4;
    tiff.extend_from_slice(&exif_ifd_offset.to_le_bytes());
    tiff.extend_from_slice(&0u32.to_le_bytes()); // no next IFD
                                                 // Exif IFD: 1 entry.
    tiff.extend_from_slice(&1u16.to_le_bytes());
    tiff.extend_from_slice(&0x9003u16.to_le_bytes()); // DateTimeOriginal
    tiff.extend_from_slice(&2u16.to_le_bytes()); // ASCII
    tiff.extend_from_slice(&20u32.to_le_bytes());
    let value_offset = exif_ifd_offset + 2 + 12 + 4;
    tiff.extend_from_slice(&value_offset.to_le_bytes());
    tiff.extend_from_slice(&0u32.to_le_bytes());
    tiff.extend_from_slice(stamp.as_bytes());

    let mut app1 = b"Exif\0\0".to_vec();
    app1.extend_from_slice(&tiff);

    let mut out = vec![0xFF, 0xD8];
    out.extend_from_slice(&[0xFF, 0xE1]);
    out.extend_from_slice(&((app1.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(&app1);
    let payload = &payload[..payload.len().min(60_000)];
    out.extend_from_slice(&[0xFF, 0xFE]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&[0xFF, 0xD9]);
    out
}
