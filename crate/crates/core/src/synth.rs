//! Seeded generator of camera-trap corpora with known ground truth.
//!
//! Visits arrive per site as a Poisson process, with each visit separated
//! from the previous one at that site by more than the grouping gap. A
//! visit emits a burst of frames 10 to 120 seconds apart, so every visit is
//! exactly one event under the chain rule. Empty triggers are independent
//! Bernoulli draws at `empty_trigger_fraction`.

use std::collections::BTreeSet;
use std::io;
use std::ops::RangeInclusive;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::Serialize;

use crate::catalog::{flags, BoundingBox, Category, LabelRecord, MediaAsset, MediaKind, TimestampSource};
use crate::detect::batch::{write_md_json, BatchDetection, DetectionBatch, ImageEntry};
use crate::digest::sha256_bytes;
use crate::events::{DatasetSummary, SpeciesTally, DEFAULT_GAP_MINUTES};
use crate::ingest::{jpeg_with_exif, session_folder_name};

pub const TRUTH_DETECTIONS_FILE: &str = "truth_detections.json";
pub const TRUTH_LABELS_FILE: &str = "truth_labels.csv";
/// Perturbed detector output, written when noise is configured.
pub const PREDICTIONS_FILE: &str = "detector_predictions.json";
pub const CARD_DIR: &str = "card";
pub const ANNOTATOR: &str = "synth";
/// Species written on labels of empty triggers.
pub const EMPTY_SPECIES: &str = "empty";

const FRAME_SPACING_SECS: RangeInclusive<i64> = 10..=120;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeciesSpec {
    pub name: String,
    pub weight: f64,
    /// Group sizes are drawn uniformly from `1..=max_group`.
    pub max_group: u32,
}

impl SpeciesSpec {
    pub fn new(name: &str, weight: f64, max_group: u32) -> Self {
        SpeciesSpec { name: name.to_string(), weight, max_group }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DetectorNoise {
    /// Probability that each true animal box is dropped.
    pub miss_rate: f64,
    /// Probability that an image gains one spurious animal box.
    pub false_positive_rate: f64,
    /// Probability that an image with animals has its box count moved by one.
    pub count_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub sites: u32,
    pub days: u32,
    pub start_date: NaiveDate,
    /// Session date; defaults to the day after the deployment ends.
    pub collection_date: Option<NaiveDate>,
    pub empty_trigger_fraction: f64,
    /// Mean visits per site per day.
    pub visit_rate_per_day: f64,
    pub frames_per_visit: RangeInclusive<u32>,
    pub species_pool: Vec<SpeciesSpec>,
    pub seed: u64,
    pub detector_noise: DetectorNoise,
    /// Gap the planted visits are separated by.
    pub gap_minutes: f64,
    /// When set, exactly this many triggers are generated; visits continue
    /// past the deployment period until the animal frames are placed.
    pub trigger_target: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sites: 3,
            days: 30,
            start_date: NaiveDate::from_ymd_opt(2024, 4, 1).expect("valid date"),
            collection_date: None,
            empty_trigger_fraction: 0.96,
            visit_rate_per_day: 2.0,
            frames_per_visit: 3..=8,
            species_pool: vec![
                SpeciesSpec::new("white-tailed deer", 5.0, 4),
                SpeciesSpec::new("wild turkey", 3.0, 6),
                SpeciesSpec::new("raccoon", 2.0, 2),
                SpeciesSpec::new("coyote", 1.0, 2),
                SpeciesSpec::new("red fox", 1.0, 1),
            ],
            seed: 1,
            detector_noise: DetectorNoise::default(),
            gap_minutes: DEFAULT_GAP_MINUTES,
            trigger_target: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid synth config: {0}")]
pub struct SynthError(pub String);

fn probability(name: &str, p: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SynthError(format!("{name} must be in [0, 1], got {p}")))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        probability("empty_trigger_fraction", self.empty_trigger_fraction)?;
        self.detector_noise.validate()?;
        if self.sites == 0 {
            return Err(SynthError("sites must be positive".into()));
        }
        if !(self.visit_rate_per_day > 0.0 && self.visit_rate_per_day.is_finite()) {
            return Err(SynthError("visit_rate_per_day must be positive".into()));
        }
        if self.frames_per_visit.is_empty() || *self.frames_per_visit.start() == 0 {
            return Err(SynthError("frames_per_visit must be a non-empty range of positive counts".into()));
        }
        if self.species_pool.is_empty() {
            return Err(SynthError("species_pool is empty".into()));
        }
        if self
            .species_pool
            .iter()
            .any(|s| s.max_group == 0 || s.weight.is_nan() || s.weight <= 0.0 || s.name.is_empty())
        {
            return Err(SynthError("species need a name, positive weight and max_group".into()));
        }
        if self.gap_minutes.is_nan() || self.gap_minutes <= 0.0 {
            return Err(SynthError("gap_minutes must be positive".into()));
        }
        if self.trigger_target.is_none() && self.days == 0 {
            return Err(SynthError("days must be positive without a trigger target".into()));
        }
        if self.empty_trigger_fraction >= 1.0 && self.trigger_target.is_none() {
            return Err(SynthError("an all-empty corpus needs a trigger target".into()));
        }
        Ok(())
    }

    pub fn session_id(&self) -> String {
        let date = self.collection_date.unwrap_or(self.start_date + Duration::days(i64::from(self.days)));
        session_folder_name(date)
    }

    pub fn site_ids(&self) -> Vec<String> {
        (1..=self.sites).map(|i| format!("S{i:02}")).collect()
    }
}

impl DetectorNoise {
    pub fn validate(&self) -> Result<(), SynthError> {
        probability("miss_rate", self.miss_rate)?;
        probability("false_positive_rate", self.false_positive_rate)?;
        probability("count_jitter", self.count_jitter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedVisit {
    pub site_id: String,
    pub species: String,
    pub group_size: u32,
    pub asset_ids: Vec<String>,
    pub start_at: NaiveDateTime,
    pub end_at: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticDataset {
    pub session_id: String,
    pub assets: Vec<MediaAsset>,
    /// One entry per asset, keyed `<site>/<file>`.
    #[serde(skip)]
    pub truth_detections: DetectionBatch,
    pub truth_labels: Vec<LabelRecord>,
    pub planted_summary: DatasetSummary,
    pub visits: Vec<PlantedVisit>,
}

impl SyntheticDataset {
    /// Canonical serialization, used to check determinism.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("dataset serializes");
        out.extend(write_md_json(&self.truth_detections));
        out
    }

    pub fn animal_fraction(&self) -> f64 {
        if self.assets.is_empty() {
            return 0.0;
        }
        let animals = self.truth_labels.iter().filter(|l| l.animal_present()).count();
        animals as f64 / self.assets.len() as f64
    }

    /// Writes `card/<site>/<file>` placeholders plus the truth files.
    pub fn write_source_tree(&self, out: &Path) -> io::Result<()> {
        for asset in &self.assets {
            let path = out.join(CARD_DIR).join(&asset.relative_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, placeholder_bytes(&asset.site_id, asset.file_name(), asset.captured_at))?;
        }
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join(TRUTH_DETECTIONS_FILE), write_md_json(&self.truth_detections))?;
        crate::export::write_timelapse_csv_file(&self.truth_labels, &out.join(TRUTH_LABELS_FILE))
            .map_err(io::Error::other)?;
        Ok(())
    }
}

/// Minimal JPEG whose EXIF time is `captured_at`. The name in the payload
/// makes every file's content distinct.
pub fn placeholder_bytes(site_id: &str, file: &str, captured_at: NaiveDateTime) -> Vec<u8> {
    jpeg_with_exif(captured_at, format!("trapline synthetic {site_id}/{file}").as_bytes())
}

struct Frame {
    site: usize,
    at: NaiveDateTime,
    planted: Option<(usize, u32)>,
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let r = crate::detect::batch::round_float;
    let w = r(rng.gen_range(0.05..0.4));
    let h = r(rng.gen_range(0.05..0.4));
    BoundingBox::new(r(rng.gen_range(0.0..1.0 - w)), r(rng.gen_range(0.0..1.0 - h)), w, h)
}

fn animal_box(rng: &mut ChaCha8Rng, conf: std::ops::Range<f64>) -> BatchDetection {
    let conf = crate::detect::batch::round_float(rng.gen_range(conf));
    let bbox = random_box(rng);
    BatchDetection::new(Category::Animal, conf, bbox)
}

/// Per-frame counts for a visit whose peak equals `group`.
fn frame_counts(rng: &mut ChaCha8Rng, frames: u32, group: u32) -> Vec<u32> {
    let mut counts: Vec<u32> = (0..frames).map(|_| rng.gen_range(1..=group)).collect();
    let peak = rng.gen_range(0..frames as usize);
    counts[peak] = group;
    counts
}

pub fn generate_dataset(config: &SynthConfig) -> Result<SyntheticDataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sites = config.site_ids();
    let session_id = config.session_id();
    let period_start = config.start_date.and_hms_opt(0, 0, 0).expect("midnight");
    let period_end = period_start + Duration::days(i64::from(config.days));
    let gap = Duration::seconds((config.gap_minutes * 60.0).ceil() as i64 + 60);
    let arrivals = Exp::new(config.visit_rate_per_day / 86_400.0).expect("positive rate");
    let species_index = WeightedIndex::new(config.species_pool.iter().map(|s| s.weight)).expect("positive weights");

    // Decide which triggers are empty up front so a fixed trigger count is
    // an exact binomial draw.
    let (animal_budget, empty_count) = match config.trigger_target {
        Some(n) => {
            let empties = (0..n).filter(|_| rng.gen_bool(config.empty_trigger_fraction)).count() as u64;
            (Some(n - empties), Some(empties))
        }
        None => (None, None),
    };

    let mut frames: Vec<Frame> = Vec::new();
    let mut planted: Vec<(usize, usize, u32)> = Vec::new(); // (site, species, group)
    let mut cursors = vec![period_start; sites.len()];
    let mut last_end: Vec<Option<NaiveDateTime>> = vec![None; sites.len()];
    let mut placed = 0u64;
    let mut open_sites: Vec<usize> = (0..sites.len()).collect();
    loop {
        let site = match animal_budget {
            Some(budget) if placed >= budget => break,
            Some(_) => rng.gen_range(0..sites.len()),
            None => {
                if open_sites.is_empty() {
                    break;
                }
                open_sites[0]
            }
        };
        let wait = Duration::seconds(arrivals.sample(&mut rng).round() as i64);
        let mut start = cursors[site] + wait;
        if animal_budget.is_none() && start >= period_end {
            open_sites.remove(0);
            continue;
        }
        if let Some(end) = last_end[site] {
            start = start.max(end + gap);
        }
        let mut n = rng.gen_range(config.frames_per_visit.clone());
        if let Some(budget) = animal_budget {
            n = n.min((budget - placed) as u32);
        }
        let species = species_index.sample(&mut rng);
        let group = rng.gen_range(1..=config.species_pool[species].max_group);
        let counts = frame_counts(&mut rng, n, group);
        let visit = planted.len();
        let mut at = start;
        for (i, count) in counts.into_iter().enumerate() {
            if i > 0 {
                at += Duration::seconds(rng.gen_range(FRAME_SPACING_SECS));
            }
            frames.push(Frame { site, at, planted: Some((visit, count)) });
        }
        planted.push((site, species, group));
        placed += u64::from(n);
        cursors[site] = start;
        last_end[site] = Some(at);
    }

    let empties = match empty_count {
        Some(n) => n,
        None => {
            // Bernoulli triggers until every animal frame is accounted for.
            let mut empties = 0u64;
            let mut animals = 0u64;
            while animals < placed {
                if rng.gen_bool(config.empty_trigger_fraction) {
                    empties += 1;
                } else {
                    animals += 1;
                }
            }
            empties
        }
    };
    let latest = frames.iter().map(|f| f.at).max().unwrap_or(period_end).max(period_end);
    let span = (latest - period_start).num_seconds().max(1);
    for _ in 0..empties {
        frames.push(Frame {
            site: rng.gen_range(0..sites.len()),
            at: period_start + Duration::seconds(rng.gen_range(0..span)),
            planted: None,
        });
    }

    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| (frames[i].site, frames[i].at, i));

    let mut assets = Vec::with_capacity(frames.len());
    let mut labels = Vec::with_capacity(frames.len());
    let mut images = Vec::with_capacity(frames.len());
    let mut visit_members: Vec<Vec<(NaiveDateTime, String)>> = vec![Vec::new(); planted.len()];
    for (seq, &i) in order.iter().enumerate() {
        let frame = &frames[i];
        let site_id = &sites[frame.site];
        let file = format!("{site_id}_{}_{seq:06}.jpg", frame.at.format("%Y%m%d_%H%M%S"));
        let bytes = placeholder_bytes(site_id, &file, frame.at);
        let checksum = sha256_bytes(&bytes);
        let temperature = rng.gen_range(2..=30);
        let (species, count, mut label_flags, detections) = match frame.planted {
            Some((visit, count)) => {
                visit_members[visit].push((frame.at, checksum.clone()));
                let name = config.species_pool[planted[visit].1].name.clone();
                let boxes = (0..count).map(|_| animal_box(&mut rng, 0.6..0.99)).collect();
                (name, count, BTreeSet::new(), boxes)
            }
            None => (EMPTY_SPECIES.to_string(), 0, BTreeSet::new(), Vec::new()),
        };
        if frame.planted.is_none() {
            label_flags.insert(flags::EMPTY.to_string());
        }
        images.push(ImageEntry::with_detections(format!("{site_id}/{file}"), detections));
        labels.push(LabelRecord {
            asset_id: Some(checksum.clone()),
            event_id: None,
            file: file.clone(),
            relative_path: format!("{session_id}/{site_id}"),
            site_id: Some(site_id.clone()),
            captured_at: Some(frame.at),
            species,
            count,
            temperature_c: Some(temperature),
            max_confidence: None,
            representative: false,
            annotator: ANNOTATOR.to_string(),
            labeled_at: None,
            flags: label_flags,
        });
        assets.push(MediaAsset {
            asset_id: checksum.clone(),
            site_id: site_id.clone(),
            session_id: session_id.clone(),
            relative_path: format!("{site_id}/{file}"),
            kind: MediaKind::Image,
            captured_at: frame.at,
            timestamp_source: TimestampSource::EmbeddedMetadata,
            size_bytes: bytes.len() as u64,
            checksum,
            temperature_c: Some(temperature),
        });
    }

    let mut summary = DatasetSummary::default();
    let mut visits = Vec::with_capacity(planted.len());
    for ((site, species, group), members) in planted.iter().zip(visit_members) {
        let name = &config.species_pool[*species].name;
        summary.event_count += 1;
        summary.individual_total += u64::from(*group);
        let tally: &mut SpeciesTally = summary.per_species.entry(name.clone()).or_default();
        tally.events += 1;
        tally.individuals += u64::from(*group);
        visits.push(PlantedVisit {
            site_id: sites[*site].clone(),
            species: name.clone(),
            group_size: *group,
            start_at: members.first().expect("visits have frames").0,
            end_at: members.last().expect("visits have frames").0,
            asset_ids: members.into_iter().map(|(_, id)| id).collect(),
        });
    }

    Ok(SyntheticDataset {
        session_id,
        assets,
        truth_detections: DetectionBatch::new(images),
        truth_labels: labels,
        planted_summary: summary,
        visits,
    })
}

/// Applies detector error modes to a truth batch: dropped boxes, spurious
/// boxes on any image, and off-by-one box counts.
pub fn perturb_detector(
    truth: &DetectionBatch,
    noise: &DetectorNoise,
    seed: u64,
) -> Result<DetectionBatch, SynthError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = truth.clone();
    for image in out.images.iter_mut() {
        let Some(detections) = image.detections.as_mut() else {
            continue;
        };
        detections.retain(|d| !(d.is_animal() && rng.gen_bool(noise.miss_rate)));
        let animals = detections.iter().filter(|d| d.is_animal()).count();
        if animals > 0 && rng.gen_bool(noise.count_jitter) {
            if animals > 1 && rng.gen_bool(0.5) {
                let last = detections.iter().rposition(|d| d.is_animal()).expect("has animal");
                detections.remove(last);
            } else {
                let conf = detections.iter().find(|d| d.is_animal()).expect("has animal").conf;
                let mut extra = animal_box(&mut rng, 0.0..1.0);
                extra.conf = conf;
                detections.push(extra);
            }
        }
        if rng.gen_bool(noise.false_positive_rate) {
            detections.push(animal_box(&mut rng, 0.05..0.6));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{dataset_summary, group_events, observations_from, GroupingConfig};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { sites: 2, days: 5, seed, ..Default::default() }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_dataset(&small(1)).unwrap();
        let b = generate_dataset(&small(1)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_dataset(&small(2)).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn planted_summary_matches_grouping() {
        let d = generate_dataset(&small(7)).unwrap();
        assert!(d.planted_summary.event_count > 0);
        let obs = observations_from(&d.assets, &[], &d.truth_labels, 0.0);
        let events = group_events(&obs, &GroupingConfig::default()).unwrap();
        assert_eq!(dataset_summary(&events), d.planted_summary);
    }

    #[test]
    fn asset_ids_are_content_hashes() {
        let d = generate_dataset(&small(3)).unwrap();
        for a in d.assets.iter().take(20) {
            let bytes = placeholder_bytes(&a.site_id, a.file_name(), a.captured_at);
            assert_eq!(sha256_bytes(&bytes), a.asset_id);
            assert_eq!(bytes.len() as u64, a.size_bytes);
        }
        let unique: BTreeSet<_> = d.assets.iter().map(|a| &a.asset_id).collect();
        assert_eq!(unique.len(), d.assets.len());
    }

    #[test]
    fn trigger_target_is_exact() {
        let cfg = SynthConfig { trigger_target: Some(2_000), ..small(5) };
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.assets.len(), 2_000);
        let animal_frames: usize = d.visits.iter().map(|v| v.asset_ids.len()).sum();
        assert_eq!(animal_frames, d.truth_labels.iter().filter(|l| l.animal_present()).count());
    }

    #[test]
    fn zero_noise_is_identity_and_full_miss_empties() {
        let d = generate_dataset(&small(4)).unwrap();
        let same = perturb_detector(&d.truth_detections, &DetectorNoise::default(), 9).unwrap();
        assert_eq!(same, d.truth_detections);
        let blind =
            perturb_detector(&d.truth_detections, &DetectorNoise { miss_rate: 1.0, ..Default::default() }, 9).unwrap();
        assert!(blind.images.iter().all(|i| i.detections().is_empty()));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small(1);
        cfg.empty_trigger_fraction = 1.5;
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = small(1);
        cfg.frames_per_visit = 0..=0;
        assert!(cfg.validate().is_err());
    }
}
