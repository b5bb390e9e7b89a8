//! Detector output versus human presence labels, per image and per event.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::catalog::{Detection, Event, LabelRecord};
use crate::detect::adapter::parent_file;
use crate::detect::batch::DetectionBatch;
use crate::export::site_from_relative_path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A ratio whose denominator may be zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    NotApplicable,
}

impl Metric {
    pub fn ratio(num: u64, den: u64) -> Metric {
        if den == 0 {
            Metric::NotApplicable
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::NotApplicable => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.4}"),
            Metric::NotApplicable => f.write_str("not_applicable"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::NotApplicable => s.serialize_str("not_applicable"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PresenceConfusion {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
    pub threshold: f64,
}

impl PresenceConfusion {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    fn add(mut self, other: PresenceConfusion) -> PresenceConfusion {
        self.true_positive += other.true_positive;
        self.false_positive += other.false_positive;
        self.true_negative += other.true_negative;
        self.false_negative += other.false_negative;
        self
    }
}

pub fn precision_recall(c: &PresenceConfusion) -> (Metric, Metric) {
    (
        Metric::ratio(c.true_positive, c.true_positive + c.false_positive),
        Metric::ratio(c.true_positive, c.true_positive + c.false_negative),
    )
}

/// Human truth per image: animal present or not.
pub type Truth = BTreeMap<String, bool>;

/// Truth keyed by `<site>/<file>`, or the bare file name when no site is
/// known. When an image has several label rows the last one wins.
pub fn truth_from_labels(labels: &[LabelRecord]) -> Truth {
    let mut truth = Truth::new();
    for label in labels {
        let site = label.site_id.clone().or_else(|| site_from_relative_path(&label.relative_path));
        let key = match site {
            Some(site) if !site.is_empty() => format!("{site}/{}", label.file),
            _ => label.file.clone(),
        };
        truth.insert(key, label.animal_present());
    }
    truth
}

/// Finds the truth key for a prediction path, trying the full path and then
/// each shorter suffix (`3May2024/S01/a.jpg`, `S01/a.jpg`, `a.jpg`).
pub fn resolve_truth_key<'a>(truth: &'a Truth, file: &str) -> Option<&'a str> {
    let file = parent_file(file);
    let mut rest = file;
    loop {
        if let Some((key, _)) = truth.get_key_value(rest) {
            return Some(key.as_str());
        }
        match rest.split_once('/') {
            Some((_, tail)) => rest = tail,
            None => return None,
        }
    }
}

/// Highest animal confidence per truth image. Video frames fold into their
/// parent; failed entries count as no detection.
fn predicted_scores<'a>(predictions: &DetectionBatch, truth: &'a Truth) -> (BTreeMap<&'a str, f64>, Vec<String>) {
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    let mut uncovered = Vec::new();
    for entry in &predictions.images {
        match resolve_truth_key(truth, &entry.file) {
            Some(key) => {
                let conf = entry.max_animal_conf(0.0).unwrap_or(f64::NEG_INFINITY);
                let slot = scores.entry(key).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(conf);
            }
            None => uncovered.push(entry.file.clone()),
        }
    }
    uncovered.sort();
    uncovered.dedup();
    (scores, uncovered)
}

fn confusion_from_scores(scores: &BTreeMap<&str, f64>, truth: &Truth, threshold: f64) -> PresenceConfusion {
    let items: Vec<(&&str, &f64)> = scores.iter().collect();
    items
        .par_iter()
        .map(|(key, score)| {
            let predicted = **score >= threshold;
            let actual = truth[**key];
            let mut c = PresenceConfusion::default();
            match (predicted, actual) {
                (true, true) => c.true_positive = 1,
                (true, false) => c.false_positive = 1,
                (false, false) => c.true_negative = 1,
                (false, true) => c.false_negative = 1,
            }
            c
        })
        .reduce(PresenceConfusion::default, PresenceConfusion::add)
        .with_threshold(threshold)
}

impl PresenceConfusion {
    fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionReport {
    pub confusion: PresenceConfusion,
    /// Prediction files with no truth entry. Excluded from the counts.
    pub uncovered: Vec<String>,
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(EvalError::Threshold(t))
    }
}

pub fn image_presence_confusion(
    predictions: &DetectionBatch,
    truth: &Truth,
    threshold: f64,
) -> Result<ConfusionReport, EvalError> {
    check_threshold(threshold)?;
    let (scores, uncovered) = predicted_scores(predictions, truth);
    for file in &uncovered {
        log::warn!("no truth label for prediction {file}");
    }
    Ok(ConfusionReport { confusion: confusion_from_scores(&scores, truth, threshold), uncovered })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub confusion: PresenceConfusion,
    pub precision: Metric,
    pub recall: Metric,
}

pub fn threshold_sweep(
    predictions: &DetectionBatch,
    truth: &Truth,
    thresholds: &[f64],
) -> Result<Vec<SweepRow>, EvalError> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::UnsortedThresholds);
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    let (scores, _) = predicted_scores(predictions, truth);
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let confusion = confusion_from_scores(&scores, truth, threshold);
            let (precision, recall) = precision_recall(&confusion);
            SweepRow { threshold, confusion, precision, recall }
        })
        .collect())
}

/// `n + 1` evenly spaced thresholds over [0, 1].
pub fn even_thresholds(n: u32) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Highest animal confidence per asset id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionIndex {
    scores: HashMap<String, f64>,
}

impl PredictionIndex {
    pub fn from_detections(detections: &[Detection]) -> Self {
        let mut scores: HashMap<String, f64> = HashMap::new();
        for d in detections.iter().filter(|d| d.category == crate::catalog::Category::Animal) {
            let slot = scores.entry(d.asset_id.clone()).or_insert(f64::NEG_INFINITY);
            *slot = slot.max(d.confidence);
        }
        PredictionIndex { scores }
    }

    /// Builds the index from a batch, mapping each file through `asset_of`.
    pub fn from_batch(batch: &DetectionBatch, asset_of: impl Fn(&str) -> Option<String>) -> Self {
        let mut scores: HashMap<String, f64> = HashMap::new();
        for entry in &batch.images {
            if let Some(id) = asset_of(parent_file(&entry.file)) {
                let conf = entry.max_animal_conf(0.0).unwrap_or(f64::NEG_INFINITY);
                let slot = scores.entry(id).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(conf);
            }
        }
        PredictionIndex { scores }
    }

    pub fn insert(&mut self, asset_id: impl Into<String>, conf: f64) {
        let slot = self.scores.entry(asset_id.into()).or_insert(f64::NEG_INFINITY);
        *slot = slot.max(conf);
    }

    pub fn is_positive(&self, asset_id: &str, threshold: f64) -> bool {
        self.scores.get(asset_id).is_some_and(|&c| c >= threshold)
    }
}

/// Fraction of events with at least one member predicted positive.
pub fn event_level_recall(truth_events: &[Event], predictions: &PredictionIndex, threshold: f64) -> Metric {
    let hit = truth_events
        .iter()
        .filter(|e| e.member_asset_ids.iter().any(|id| predictions.is_positive(id, threshold)))
        .count();
    Metric::ratio(hit as u64, truth_events.len() as u64)
}

/// Fraction of all event member images predicted positive.
pub fn image_level_recall(truth_events: &[Event], predictions: &PredictionIndex, threshold: f64) -> Metric {
    let (hit, total) = truth_events.iter().fold((0u64, 0u64), |(hit, total), e| {
        let h = e.member_asset_ids.iter().filter(|id| predictions.is_positive(id, threshold)).count() as u64;
        (hit + h, total + e.member_asset_ids.len() as u64)
    });
    Metric::ratio(hit, total)
}

/// Per-event hit fraction averaged over events. Never exceeds event recall.
pub fn macro_image_recall(truth_events: &[Event], predictions: &PredictionIndex, threshold: f64) -> Metric {
    let fractions: Vec<f64> = truth_events
        .iter()
        .filter(|e| !e.member_asset_ids.is_empty())
        .map(|e| {
            let h = e.member_asset_ids.iter().filter(|id| predictions.is_positive(id, threshold)).count();
            h as f64 / e.member_asset_ids.len() as f64
        })
        .collect();
    if fractions.is_empty() {
        return Metric::NotApplicable;
    }
    Metric::Value(fractions.iter().sum::<f64>() / fractions.len() as f64)
}

pub const REPORT_HEADER: [&str; 7] =
    ["Threshold", "TruePositive", "FalsePositive", "TrueNegative", "FalseNegative", "Precision", "Recall"];

fn metric_cell(m: Metric) -> String {
    match m {
        Metric::Value(v) => crate::export::format_confidence(v),
        Metric::NotApplicable => "not_applicable".into(),
    }
}

/// Sweep rows as CSV, in the same dialect as the label export.
pub fn write_report_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), EvalError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out);
    writer.write_record(REPORT_HEADER)?;
    for r in rows {
        let c = &r.confusion;
        writer.write_record([
            crate::export::format_confidence(r.threshold),
            c.true_positive.to_string(),
            c.false_positive.to_string(),
            c.true_negative.to_string(),
            c.false_negative.to_string(),
            metric_cell(r.precision),
            metric_cell(r.recall),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn render_summary(report: &ConfusionReport, sweep: &[SweepRow], event_recall: Option<Metric>) -> String {
    use std::fmt::Write as _;
    let c = &report.confusion;
    let (p, r) = precision_recall(c);
    let mut out = String::new();
    let _ = writeln!(out, "images evaluated: {} (uncovered: {})", c.total(), report.uncovered.len());
    let _ = writeln!(out, "threshold {}", c.threshold);
    let _ = writeln!(out, "               truth+  truth-");
    let _ = writeln!(out, "  predicted+ {:>8} {:>7}", c.true_positive, c.false_positive);
    let _ = writeln!(out, "  predicted- {:>8} {:>7}", c.false_negative, c.true_negative);
    let _ = writeln!(out, "precision {p}  recall {r}");
    if let Some(er) = event_recall {
        let _ = writeln!(out, "event recall {er}");
    }
    if !sweep.is_empty() {
        let _ = writeln!(out, "sweep:");
        for row in sweep {
            let _ = writeln!(
                out,
                "  t={:.2}  precision {}  recall {}  fp {}",
                row.threshold, row.precision, row.recall, row.confusion.false_positive
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{BoundingBox, Category};
    use crate::detect::batch::{BatchDetection, ImageEntry};

    fn hit(conf: f64) -> Vec<BatchDetection> {
        vec![BatchDetection::new(Category::Animal, conf, BoundingBox::new(0.1, 0.1, 0.2, 0.2))]
    }

    fn perfect(n: usize, positives: usize) -> (DetectionBatch, Truth) {
        let mut truth = Truth::new();
        let mut images = Vec::new();
        for i in 0..n {
            let file = format!("S01/{i:03}.jpg");
            let present = i < positives;
            truth.insert(file.clone(), present);
            images.push(ImageEntry::with_detections(file, if present { hit(0.9) } else { vec![] }));
        }
        (DetectionBatch::new(images), truth)
    }

    #[test]
    fn perfect_detector() {
        let (batch, truth) = perfect(10, 4);
        let c = image_presence_confusion(&batch, &truth, 0.5).unwrap().confusion;
        assert_eq!((c.true_positive, c.true_negative, c.false_positive, c.false_negative), (4, 6, 0, 0));
    }

    #[test]
    fn all_empty_predictions() {
        let (_, truth) = perfect(10, 4);
        let batch = DetectionBatch::new(truth.keys().map(|k| ImageEntry::with_detections(k.clone(), vec![])).collect());
        let c = image_presence_confusion(&batch, &truth, 0.5).unwrap().confusion;
        assert_eq!(c.true_positive, 0);
        assert_eq!(c.false_negative, 4);
    }

    #[test]
    fn precision_recall_arithmetic() {
        let c = |tp, fp, fn_| PresenceConfusion {
            true_positive: tp,
            false_positive: fp,
            false_negative: fn_,
            ..Default::default()
        };
        assert_eq!(precision_recall(&c(4, 1, 0)), (Metric::Value(0.8), Metric::Value(1.0)));
        assert_eq!(precision_recall(&c(0, 0, 2)).0, Metric::NotApplicable);
        assert_eq!(precision_recall(&c(9, 1, 3)), (Metric::Value(0.9), Metric::Value(0.75)));
    }

    #[test]
    fn uncovered_files_are_excluded() {
        let (mut batch, truth) = perfect(4, 2);
        batch.images.push(ImageEntry::with_detections("S09/x.jpg", hit(0.9)));
        let report = image_presence_confusion(&batch, &truth, 0.5).unwrap();
        assert_eq!(report.uncovered, ["S09/x.jpg"]);
        assert_eq!(report.confusion.total() + report.uncovered.len() as u64, 5);
    }

    #[test]
    fn resolves_longer_and_frame_paths() {
        let (_, truth) = perfect(2, 1);
        assert_eq!(resolve_truth_key(&truth, "3May2024/S01/000.jpg"), Some("S01/000.jpg"));
        assert_eq!(resolve_truth_key(&truth, "S01/001.jpg#12.5"), Some("S01/001.jpg"));
        assert_eq!(resolve_truth_key(&truth, "S02/001.jpg"), None);
    }

    #[test]
    fn failure_entries_are_negative() {
        let mut truth = Truth::new();
        truth.insert("a.jpg".into(), true);
        let batch = DetectionBatch::new(vec![ImageEntry::failed("a.jpg", "corrupt")]);
        let c = image_presence_confusion(&batch, &truth, 0.1).unwrap().confusion;
        assert_eq!(c.false_negative, 1);
    }

    #[test]
    fn sweep_requires_sorted_thresholds() {
        let (batch, truth) = perfect(3, 1);
        assert!(matches!(threshold_sweep(&batch, &truth, &[0.5, 0.2]), Err(EvalError::UnsortedThresholds)));
        let rows = threshold_sweep(&batch, &truth, &[0.3]).unwrap();
        let direct = image_presence_confusion(&batch, &truth, 0.3).unwrap().confusion;
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].confusion, direct);
        assert_eq!((rows[0].precision, rows[0].recall), precision_recall(&direct));
    }

    fn event(members: &[&str]) -> Event {
        let t = chrono::NaiveDate::from_ymd_opt(2024, 5, 3).unwrap().and_hms_opt(0, 0, 0).unwrap();
        Event {
            event_id: "E1".into(),
            run: 0,
            site_id: "S01".into(),
            member_asset_ids: members.iter().map(|s| s.to_string()).collect(),
            start_at: t,
            end_at: t,
            representative_asset_id: members[0].into(),
            species: None,
            individual_count: 1,
        }
    }

    #[test]
    fn event_recall_counts_any_member() {
        let mut index = PredictionIndex::default();
        index.insert("c", 0.7);
        let events = [event(&["a", "b", "c", "d", "e"]), event(&["f"])];
        assert_eq!(event_level_recall(&events, &index, 0.5), Metric::Value(0.5));
        assert_eq!(event_level_recall(&events, &index, 0.8), Metric::Value(0.0));
        assert_eq!(event_level_recall(&[], &index, 0.5), Metric::NotApplicable);
        assert_eq!(image_level_recall(&events, &index, 0.5), Metric::Value(1.0 / 6.0));
        assert_eq!(macro_image_recall(&events, &index, 0.5), Metric::Value(0.1));
    }

    #[test]
    fn report_csv_shape() {
        let (batch, truth) = perfect(4, 2);
        let rows = threshold_sweep(&batch, &truth, &even_thresholds(2)).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("Threshold,TruePositive"));
        assert!(text.lines().last().unwrap().starts_with("1,0,0,2,2,not_applicable,0"));
    }
}
