//! Reader and writer for detector batch-output JSON.
//!
//! Document shape:
//!
//! ```json
//! {
//!  "detection_categories": {"1": "animal", "2": "person", "3": "vehicle"},
//!  "images": [
//!   {"detections": [{"bbox": [0.1, 0.2, 0.3, 0.4], "category": "1", "conf": 0.92}],
//!    "file": "IMG_0001.JPG"},
//!   {"failure": "corrupt", "file": "IMG_0002.JPG"}
//!  ],
//!  "info": {"detector_name": "md_v5a.0.0.pt", "format_version": "1.3"}
//! }
//! ```
//!
//! Keys are written in sorted order, floats with at most five decimals, and
//! one-space indentation. Keys the codec does not model are carried through
//! untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::catalog::{clamp_unit, BoundingBox, Category};

/// Floats in written documents carry at most this many decimals.
pub const FLOAT_DECIMALS: usize = 5;

/// Largest difference a write/parse cycle can introduce in a float.
pub const ROUND_TRIP_TOLERANCE: f64 = 5e-6 + 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("document has no `images` array")]
    MissingImages,
    #[error("{location}: {reason}")]
    Invalid { location: String, reason: String },
}

fn invalid(location: impl Into<String>, reason: impl Into<String>) -> BatchError {
    BatchError::Invalid { location: location.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDetection {
    /// Category key into `detection_categories`, e.g. `"1"`.
    pub category: String,
    pub conf: f64,
    pub bbox: BoundingBox,
    pub extra: BTreeMap<String, Value>,
}

impl BatchDetection {
    pub fn new(category: Category, conf: f64, bbox: BoundingBox) -> Self {
        BatchDetection { category: category.id().to_string(), conf, bbox, extra: BTreeMap::new() }
    }

    pub fn category(&self) -> Option<Category> {
        self.category.parse().ok().and_then(Category::from_id)
    }

    pub fn is_animal(&self) -> bool {
        self.category() == Some(Category::Animal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub file: String,
    pub detections: Option<Vec<BatchDetection>>,
    pub failure: Option<String>,
    pub extra: BTreeMap<String, Value>,
}

impl ImageEntry {
    pub fn with_detections(file: impl Into<String>, detections: Vec<BatchDetection>) -> Self {
        ImageEntry { file: file.into(), detections: Some(detections), failure: None, extra: BTreeMap::new() }
    }

    pub fn failed(file: impl Into<String>, reason: impl Into<String>) -> Self {
        ImageEntry { file: file.into(), detections: None, failure: Some(reason.into()), extra: BTreeMap::new() }
    }

    pub fn detections(&self) -> &[BatchDetection] {
        self.detections.as_deref().unwrap_or(&[])
    }

    /// Highest animal confidence at or above `threshold`.
    pub fn max_animal_conf(&self, threshold: f64) -> Option<f64> {
        self.detections()
            .iter()
            .filter(|d| d.is_animal() && d.conf >= threshold)
            .map(|d| d.conf)
            .fold(None, |acc, c| Some(acc.map_or(c, |a: f64| a.max(c))))
    }

    pub fn has_animal(&self, threshold: f64) -> bool {
        self.max_animal_conf(threshold).is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchInfo {
    pub format_version: Option<String>,
    pub detector_name: Option<String>,
    /// Kept verbatim; upstream tools disagree on the timestamp format.
    pub generated_at: Option<String>,
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBatch {
    pub images: Vec<ImageEntry>,
    pub detection_categories: BTreeMap<String, String>,
    pub info: BatchInfo,
    /// Unmodeled top-level keys.
    pub extra: BTreeMap<String, Value>,
}

pub fn default_categories() -> BTreeMap<String, String> {
    Category::ALL.into_iter().map(|c| (c.id().to_string(), c.name().to_string())).collect()
}

impl Default for DetectionBatch {
    fn default() -> Self {
        DetectionBatch {
            images: Vec::new(),
            detection_categories: default_categories(),
            info: BatchInfo::default(),
            extra: BTreeMap::new(),
        }
    }
}

impl DetectionBatch {
    pub fn new(images: Vec<ImageEntry>) -> Self {
        DetectionBatch { images, ..Default::default() }
    }

    pub fn category_name(&self, key: &str) -> Option<&str> {
        self.detection_categories.get(key).map(String::as_str)
    }

    pub fn detection_count(&self) -> usize {
        self.images.iter().map(|i| i.detections().len()).sum()
    }

    pub fn sort_by_file(&mut self) {
        self.images.sort_by(|a, b| a.file.cmp(&b.file));
    }

    /// Equality with floats compared within [`ROUND_TRIP_TOLERANCE`].
    pub fn semantically_eq(&self, other: &DetectionBatch) -> bool {
        self.detection_categories == other.detection_categories
            && self.info == other.info
            && self.extra == other.extra
            && self.images.len() == other.images.len()
            && self.images.iter().zip(&other.images).all(|(a, b)| image_semantically_eq(a, b))
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ROUND_TRIP_TOLERANCE
}

fn image_semantically_eq(a: &ImageEntry, b: &ImageEntry) -> bool {
    let dets_eq = match (&a.detections, &b.detections) {
        (None, None) => true,
        (Some(x), Some(y)) => {
            x.len() == y.len()
                && x.iter().zip(y).all(|(p, q)| {
                    p.category == q.category
                        && p.extra == q.extra
                        && close(p.conf, q.conf)
                        && close(p.bbox.x, q.bbox.x)
                        && close(p.bbox.y, q.bbox.y)
                        && close(p.bbox.w, q.bbox.w)
                        && close(p.bbox.h, q.bbox.h)
                })
        }
        _ => false,
    };
    dets_eq && a.file == b.file && a.failure == b.failure && a.extra == b.extra
}

/// A problem found by [`validate_batch`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub location: String,
    pub reason: String,
}

/// Checks an in-memory batch against the format invariants without
/// modifying it. An empty result means the batch is valid.
pub fn validate_batch(batch: &DetectionBatch) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut push = |location: String, reason: String| issues.push(Issue { location, reason });
    for (i, image) in batch.images.iter().enumerate() {
        let loc = format!("images[{i}]");
        if image.file.is_empty() {
            push(loc.clone(), "empty file path".into());
        }
        if image.detections.is_none() && image.failure.is_none() {
            push(loc.clone(), "neither detections nor failure".into());
        }
        for (j, det) in image.detections().iter().enumerate() {
            let dloc = format!("{loc}.detections[{j}]");
            if !batch.detection_categories.contains_key(&det.category) {
                push(dloc.clone(), format!("category {:?} not in detection_categories", det.category));
            }
            if !(0.0..=1.0).contains(&det.conf) {
                push(dloc.clone(), format!("conf {} outside [0, 1]", det.conf));
            }
            let b = det.bbox;
            let in_unit = [b.x, b.y, b.w, b.h].iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || b.x + b.w > 1.0 + 1e-6 || b.y + b.h > 1.0 + 1e-6 {
                push(dloc, format!("bbox {:?} outside the unit square", [b.x, b.y, b.w, b.h]));
            }
        }
    }
    issues
}

/// Parses a batch document, enforcing its invariants. Confidences and box
/// coordinates within 1e-6 of the unit interval are clamped.
pub fn parse_md_json(bytes: &[u8]) -> Result<DetectionBatch, BatchError> {
    let root: Value = serde_json::from_slice(bytes)?;
    let Value::Object(mut root) = root else {
        return Err(invalid("$", "top level is not an object"));
    };

    let detection_categories = match root.remove("detection_categories") {
        None | Some(Value::Null) => default_categories(),
        Some(Value::Object(map)) => map
            .into_iter()
            .map(|(k, v)| match v {
                Value::String(s) => Ok((k, s)),
                other => Err(invalid(format!("detection_categories.{k}"), format!("expected string, found {other}"))),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(invalid("detection_categories", "expected an object")),
    };

    let info = match root.remove("info") {
        None | Some(Value::Null) => BatchInfo::default(),
        Some(Value::Object(map)) => parse_info(map)?,
        Some(_) => return Err(invalid("info", "expected an object")),
    };

    let images = match root.remove("images") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(invalid("images", "expected an array")),
        None => return Err(BatchError::MissingImages),
    };
    let images = images
        .into_iter()
        .enumerate()
        .map(|(i, v)| parse_image(i, v, &detection_categories))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(DetectionBatch { images, detection_categories, info, extra: root.into_iter().collect() })
}

fn opt_string(map: &mut Map<String, Value>, key: &str, loc: &str) -> Result<Option<String>, BatchError> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(invalid(format!("{loc}.{key}"), format!("expected string, found {other}"))),
    }
}

fn parse_info(mut map: Map<String, Value>) -> Result<BatchInfo, BatchError> {
    Ok(BatchInfo {
        format_version: opt_string(&mut map, "format_version", "info")?,
        detector_name: opt_string(&mut map, "detector_name", "info")?,
        generated_at: opt_string(&mut map, "generated_at", "info")?,
        extra: map.into_iter().collect(),
    })
}

fn parse_image(index: usize, value: Value, categories: &BTreeMap<String, String>) -> Result<ImageEntry, BatchError> {
    let loc = format!("images[{index}]");
    let Value::Object(mut map) = value else {
        return Err(invalid(loc, "expected an object"));
    };
    let file = match map.remove("file") {
        Some(Value::String(s)) if !s.is_empty() => s,
        _ => return Err(invalid(loc, "missing `file` string")),
    };
    let failure = opt_string(&mut map, "failure", &loc)?;
    let detections = match map.remove("detections") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .into_iter()
                .enumerate()
                .map(|(j, v)| parse_detection(&format!("{loc}.detections[{j}]"), v, categories))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(invalid(format!("{loc}.detections"), "expected an array")),
    };
    if detections.is_none() && failure.is_none() {
        return Err(invalid(loc, "entry has neither detections nor failure"));
    }
    Ok(ImageEntry { file, detections, failure, extra: map.into_iter().collect() })
}

fn number(loc: &str, value: Option<Value>) -> Result<f64, BatchError> {
    value.as_ref().and_then(Value::as_f64).ok_or_else(|| invalid(loc, "expected a number"))
}

fn parse_detection(
    loc: &str,
    value: Value,
    categories: &BTreeMap<String, String>,
) -> Result<BatchDetection, BatchError> {
    let Value::Object(mut map) = value else {
        return Err(invalid(loc, "expected an object"));
    };
    let category = match map.remove("category") {
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(invalid(loc, "missing `category`")),
    };
    if !categories.contains_key(&category) {
        return Err(invalid(loc, format!("category {category:?} not in detection_categories")));
    }
    let conf = number(&format!("{loc}.conf"), map.remove("conf"))?;
    let conf = clamp_unit(conf, "conf").map_err(|r| invalid(loc, r))?;
    let bbox = match map.remove("bbox") {
        Some(Value::Array(items)) if items.len() == 4 => {
            let mut v = [0.0; 4];
            for (slot, item) in v.iter_mut().zip(items) {
                *slot = number(&format!("{loc}.bbox"), Some(item))?;
            }
            BoundingBox::from(v).clamped().map_err(|r| invalid(loc, r))?
        }
        _ => return Err(invalid(loc, "`bbox` must be an array of four numbers")),
    };
    Ok(BatchDetection { category, conf, bbox, extra: map.into_iter().collect() })
}

/// Rounds to [`FLOAT_DECIMALS`] places using decimal formatting, so the
/// written text is exactly the rounded decimal.
pub fn round_float(v: f64) -> f64 {
    let text = format!("{:.*}", FLOAT_DECIMALS, v);
    let rounded: f64 = text.parse().expect("formatted float parses");
    if rounded == 0.0 {
        0.0
    } else {
        rounded
    }
}

fn float_value(v: f64) -> Value {
    Number::from_f64(round_float(v)).map_or(Value::Null, Value::Number)
}

/// Rounds box coordinates, shrinking w or h by one unit in the last place
/// when independent rounding would push the box past the image edge.
fn rounded_box(b: BoundingBox) -> [f64; 4] {
    let fit = |origin: f64, extent: f64| {
        let (o, e) = (round_float(origin), round_float(extent));
        if o + e > 1.0 {
            (o, round_float(1.0 - o))
        } else {
            (o, e)
        }
    };
    let (x, w) = fit(b.x, b.w);
    let (y, h) = fit(b.y, b.h);
    [x, y, w, h]
}

fn extras_into(map: &mut Map<String, Value>, extra: &BTreeMap<String, Value>) {
    for (k, v) in extra {
        map.insert(k.clone(), v.clone());
    }
}

fn batch_to_value(batch: &DetectionBatch) -> Value {
    let mut root = Map::new();
    extras_into(&mut root, &batch.extra);
    root.insert(
        "detection_categories".into(),
        Value::Object(batch.detection_categories.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect()),
    );
    let images = batch
        .images
        .iter()
        .map(|image| {
            let mut m = Map::new();
            extras_into(&mut m, &image.extra);
            if let Some(dets) = &image.detections {
                let dets = dets
                    .iter()
                    .map(|d| {
                        let mut dm = Map::new();
                        extras_into(&mut dm, &d.extra);
                        let b = d.bbox;
                        dm.insert("bbox".into(), Value::Array(rounded_box(b).into_iter().map(float_value).collect()));
                        dm.insert("category".into(), Value::String(d.category.clone()));
                        dm.insert("conf".into(), float_value(d.conf));
                        Value::Object(dm)
                    })
                    .collect();
                m.insert("detections".into(), Value::Array(dets));
            }
            if let Some(f) = &image.failure {
                m.insert("failure".into(), Value::String(f.clone()));
            }
            m.insert("file".into(), Value::String(image.file.clone()));
            Value::Object(m)
        })
        .collect();
    root.insert("images".into(), Value::Array(images));

    let mut info = Map::new();
    extras_into(&mut info, &batch.info.extra);
    for (key, value) in [
        ("detector_name", &batch.info.detector_name),
        ("format_version", &batch.info.format_version),
        ("generated_at", &batch.info.generated_at),
    ] {
        if let Some(v) = value {
            info.insert(key.into(), Value::String(v.clone()));
        }
    }
    root.insert("info".into(), Value::Object(info));
    Value::Object(root)
}

/// Serializes a batch. Output is deterministic: sorted keys, five-decimal
/// floats, one-space indentation, trailing newline.
pub fn write_md_json(batch: &DetectionBatch) -> Vec<u8> {
    let value = batch_to_value(batch);
    let mut out = Vec::new();
    let formatter = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, formatter);
    value.serialize(&mut ser).expect("serializing a Value into memory cannot fail");
    out.push(b'\n');
    out
}

#[derive(Debug, thiserror::Error)]
pub enum BatchOpError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("detection_categories differ between batches")]
    CategoryMismatch,
    #[error("file {0:?} appears in more than one batch")]
    DuplicateFile(String),
}

/// Drops detections below `threshold`; detections equal to it are kept.
/// Image entries are always retained, even when left without detections.
pub fn filter_by_confidence(batch: &DetectionBatch, threshold: f64) -> Result<DetectionBatch, BatchOpError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(BatchOpError::Threshold(threshold));
    }
    let mut out = batch.clone();
    for image in &mut out.images {
        if let Some(dets) = &mut image.detections {
            dets.retain(|d| d.conf >= threshold);
        }
    }
    Ok(out)
}

/// Concatenates batches into one, sorted by file path. Info fields and
/// extra keys survive only when every input carries the same value, which
/// keeps the merge associative and commutative.
pub fn merge_batches(batches: &[DetectionBatch]) -> Result<DetectionBatch, BatchOpError> {
    let Some(first) = batches.first() else {
        return Ok(DetectionBatch::default());
    };
    if batches.iter().any(|b| b.detection_categories != first.detection_categories) {
        return Err(BatchOpError::CategoryMismatch);
    }
    let mut seen = BTreeSet::new();
    let mut images = Vec::new();
    for batch in batches {
        for image in &batch.images {
            if !seen.insert(image.file.clone()) {
                return Err(BatchOpError::DuplicateFile(image.file.clone()));
            }
            images.push(image.clone());
        }
    }
    images.sort_by(|a, b| a.file.cmp(&b.file));

    let agree = |get: &dyn Fn(&DetectionBatch) -> &Option<String>| {
        let v = get(first);
        if batches.iter().all(|b| get(b) == v) {
            v.clone()
        } else {
            None
        }
    };
    let common = |get: &dyn Fn(&DetectionBatch) -> &BTreeMap<String, Value>| {
        get(first)
            .iter()
            .filter(|(k, v)| batches.iter().all(|b| get(b).get(*k) == Some(*v)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<BTreeMap<_, _>>()
    };
    Ok(DetectionBatch {
        images,
        detection_categories: first.detection_categories.clone(),
        info: BatchInfo {
            format_version: agree(&|b| &b.info.format_version),
            detector_name: agree(&|b| &b.info.detector_name),
            generated_at: agree(&|b| &b.info.generated_at),
            extra: common(&|b| &b.info.extra),
        },
        extra: common(&|b| &b.extra),
    })
}
