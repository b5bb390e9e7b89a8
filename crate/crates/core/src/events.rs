//! Grouping of per-image observations into ecological events.
//!
//! Within each key group (site, optionally species) observations are taken
//! in time order, and each one joins the running event when it follows the
//! previous member by at most `gap_minutes`; otherwise it opens a new event.
//! An event's individual count is the largest per-frame count among its
//! members, so an animal lingering across frames is counted once.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CatalogError, Category, Detection, Event, LabelRecord, MediaAsset};

pub const DEFAULT_GAP_MINUTES: f64 = 10.0;
pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, thiserror::Error)]
pub enum EventsError {
    #[error("observation for asset {0} has no capture time")]
    MissingTimestamp(String),
    #[error("invalid grouping config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyField {
    SiteId,
    Species,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeRule {
    #[default]
    MaxConfidence,
    Earliest,
}

impl std::str::FromStr for RepresentativeRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max_confidence" => Ok(RepresentativeRule::MaxConfidence),
            "earliest" => Ok(RepresentativeRule::Earliest),
            other => Err(format!("unknown representative rule {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingConfig {
    pub gap_minutes: f64,
    pub key_fields: Vec<KeyField>,
    pub representative_rule: RepresentativeRule,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            gap_minutes: DEFAULT_GAP_MINUTES,
            key_fields: vec![KeyField::SiteId],
            representative_rule: RepresentativeRule::MaxConfidence,
        }
    }
}

impl GroupingConfig {
    pub fn with_gap(gap_minutes: f64) -> Self {
        GroupingConfig { gap_minutes, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), EventsError> {
        if !(self.gap_minutes.is_finite() && self.gap_minutes > 0.0) {
            return Err(EventsError::Config(format!("gap_minutes must be > 0, got {}", self.gap_minutes)));
        }
        if !self.key_fields.contains(&KeyField::SiteId) {
            return Err(EventsError::Config("key_fields must include site_id".into()));
        }
        Ok(())
    }

    fn by_species(&self) -> bool {
        self.key_fields.contains(&KeyField::Species)
    }

    fn within_gap(&self, earlier: NaiveDateTime, later: NaiveDateTime) -> bool {
        let delta_ms = (later - earlier).num_milliseconds().abs();
        delta_ms as f64 <= self.gap_minutes * 60_000.0
    }
}

/// One asset that shows an animal, by detection or by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub asset_id: String,
    pub site_id: String,
    pub captured_at: Option<NaiveDateTime>,
    pub species: Option<String>,
    pub max_animal_confidence: f64,
    pub animal_count: u32,
}

fn observation_order(a: &Observation, b: &Observation) -> std::cmp::Ordering {
    (&a.site_id, a.captured_at, &a.asset_id).cmp(&(&b.site_id, b.captured_at, &b.asset_id))
}

/// Builds observations from catalog records. Only animal detections at or
/// above `threshold` count; a label asserting an animal includes the asset
/// even without detections, and supplies species and count. When an asset
/// has several labels the last one wins.
pub fn observations_from(
    assets: &[MediaAsset],
    detections: &[Detection],
    labels: &[LabelRecord],
    threshold: f64,
) -> Vec<Observation> {
    let mut boxes: HashMap<&str, (u32, f64)> = HashMap::new();
    for d in detections {
        if d.category == Category::Animal && d.confidence >= threshold {
            let entry = boxes.entry(d.asset_id.as_str()).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 = entry.1.max(d.confidence);
        }
    }
    let mut latest_label: HashMap<&str, &LabelRecord> = HashMap::new();
    for label in labels {
        if let Some(id) = &label.asset_id {
            latest_label.insert(id.as_str(), label);
        }
    }

    let mut out: Vec<Observation> = assets
        .iter()
        .filter_map(|asset| {
            let detected = boxes.get(asset.asset_id.as_str()).copied();
            let label = latest_label.get(asset.asset_id.as_str()).copied().filter(|l| l.animal_present());
            if detected.is_none() && label.is_none() {
                return None;
            }
            let (box_count, max_conf) = detected.unwrap_or((0, 0.0));
            Some(Observation {
                asset_id: asset.asset_id.clone(),
                site_id: asset.site_id.clone(),
                captured_at: Some(asset.captured_at),
                species: label.map(|l| l.species.clone()),
                max_animal_confidence: max_conf,
                animal_count: label.map_or(box_count, |l| l.count),
            })
        })
        .collect();
    out.sort_by(observation_order);
    out
}

pub fn collect_observations(catalog: &Catalog, threshold: f64) -> Result<Vec<Observation>, CatalogError> {
    let assets = catalog.assets()?;
    let detections = catalog.detections()?;
    let labels = catalog.labels()?;
    Ok(observations_from(&assets, &detections, &labels, threshold))
}

type GroupKey = (String, Option<String>);

fn group_key(obs: &Observation, config: &GroupingConfig) -> GroupKey {
    let species = if config.by_species() { obs.species.clone() } else { None };
    (obs.site_id.clone(), species)
}

fn sorted_checked(observations: &[Observation]) -> Result<Vec<&Observation>, EventsError> {
    if let Some(missing) = observations.iter().find(|o| o.captured_at.is_none()) {
        return Err(EventsError::MissingTimestamp(missing.asset_id.clone()));
    }
    let mut sorted: Vec<&Observation> = observations.iter().collect();
    sorted.sort_by(|a, b| observation_order(a, b));
    Ok(sorted)
}

/// Groups observations into events using the chain rule.
pub fn group_events(observations: &[Observation], config: &GroupingConfig) -> Result<Vec<Event>, EventsError> {
    config.validate()?;
    let sorted = sorted_checked(observations)?;

    let mut groups: BTreeMap<GroupKey, Vec<&Observation>> = BTreeMap::new();
    for obs in sorted {
        groups.entry(group_key(obs, config)).or_default().push(obs);
    }

    let mut partitions = Vec::new();
    for members in groups.into_values() {
        let mut current: Vec<&Observation> = Vec::new();
        for obs in members {
            if let Some(prev) = current.last() {
                if !config.within_gap(prev.captured_at.unwrap(), obs.captured_at.unwrap()) {
                    partitions.push(std::mem::take(&mut current));
                }
            }
            current.push(obs);
        }
        if !current.is_empty() {
            partitions.push(current);
        }
    }
    Ok(assemble(partitions, config))
}

/// Reference grouping: connected components of the "within gap" relation
/// over all pairs in a key group, found by union-find in O(n²). On a time
/// line this coincides with the chain rule, so it must agree with
/// [`group_events`] exactly.
pub fn oracle_group_events(observations: &[Observation], config: &GroupingConfig) -> Result<Vec<Event>, EventsError> {
    config.validate()?;
    let items = sorted_checked(observations)?;
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let keys: Vec<GroupKey> = items.iter().map(|o| group_key(o, config)).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if keys[i] == keys[j] && config.within_gap(items[i].captured_at.unwrap(), items[j].captured_at.unwrap()) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<&Observation>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let root = find(&mut parent, i);
        components.entry(root).or_default().push(*item);
    }
    Ok(assemble(components.into_values().collect(), config))
}

fn assemble(partitions: Vec<Vec<&Observation>>, config: &GroupingConfig) -> Vec<Event> {
    let mut events: Vec<Event> = partitions
        .into_iter()
        .map(|mut members| {
            members.sort_by(|a, b| (a.captured_at, &a.asset_id).cmp(&(b.captured_at, &b.asset_id)));
            let first = members[0];
            let last = members[members.len() - 1];
            Event {
                event_id: String::new(),
                run: 0,
                site_id: first.site_id.clone(),
                member_asset_ids: members.iter().map(|o| o.asset_id.clone()).collect(),
                start_at: first.captured_at.unwrap(),
                end_at: last.captured_at.unwrap(),
                representative_asset_id: pick_representative(&members, config.representative_rule),
                species: event_species(&members),
                individual_count: members.iter().map(|o| o.animal_count).max().unwrap_or(0),
            }
        })
        .collect();
    events.sort_by(|a, b| {
        (&a.site_id, a.start_at, &a.member_asset_ids[0]).cmp(&(&b.site_id, b.start_at, &b.member_asset_ids[0]))
    });
    for (i, event) in events.iter_mut().enumerate() {
        event.event_id = event_id(i as u64 + 1);
    }
    events
}

pub fn event_id(n: u64) -> String {
    format!("E{n:06}")
}

/// Most frequent species among members; ties go to the alphabetically first.
fn event_species(members: &[&Observation]) -> Option<String> {
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for m in members {
        if let Some(s) = &m.species {
            *tally.entry(s.as_str()).or_default() += 1;
        }
    }
    let best = tally.values().copied().max()?;
    tally.into_iter().find(|(_, n)| *n == best).map(|(s, _)| s.to_string())
}

fn pick_representative(members: &[&Observation], rule: RepresentativeRule) -> String {
    match rule {
        RepresentativeRule::Earliest => members[0].asset_id.clone(),
        RepresentativeRule::MaxConfidence => members
            .iter()
            .min_by(|a, b| {
                b.max_animal_confidence
                    .total_cmp(&a.max_animal_confidence)
                    .then_with(|| a.captured_at.cmp(&b.captured_at))
                    .then_with(|| a.asset_id.cmp(&b.asset_id))
            })
            .map(|o| o.asset_id.clone())
            .expect("events are non-empty"),
    }
}

fn members_of<'a>(event: &Event, observations: &'a [Observation]) -> Vec<&'a Observation> {
    let index: HashMap<&str, &Observation> = observations.iter().map(|o| (o.asset_id.as_str(), o)).collect();
    event.member_asset_ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
}

/// Chooses the image that stands for the event. `MaxConfidence` prefers the
/// highest animal confidence, then the earliest capture, then the smallest
/// asset id. Members without an observation are ignored; if none remain the
/// first member is returned.
pub fn select_representative(event: &Event, observations: &[Observation], rule: RepresentativeRule) -> String {
    let mut members = members_of(event, observations);
    if members.is_empty() {
        return event.member_asset_ids[0].clone();
    }
    members.sort_by(|a, b| (a.captured_at, &a.asset_id).cmp(&(b.captured_at, &b.asset_id)));
    pick_representative(&members, rule)
}

/// Largest per-frame animal count among the event's members.
pub fn count_individuals(event: &Event, observations: &[Observation]) -> u32 {
    members_of(event, observations).iter().map(|o| o.animal_count).max().unwrap_or(0)
}

/// Marks a fresh grouping as run `run`, numbering ids after every id already
/// issued so event ids stay unique across runs.
pub fn stamp_run(events: &mut [Event], previous: &[Event]) -> u32 {
    let run = previous.iter().map(|e| e.run).max().map_or(1, |r| r + 1);
    let issued = previous.iter().filter_map(|e| e.event_id.strip_prefix('E')?.parse::<u64>().ok()).max().unwrap_or(0);
    for (i, event) in events.iter_mut().enumerate() {
        event.run = run;
        event.event_id = event_id(issued + 1 + i as u64);
    }
    run
}

/// True when both lists describe the same grouping, ignoring ids and runs.
pub fn same_grouping(a: &[Event], b: &[Event]) -> bool {
    let strip = |e: &Event| Event { event_id: String::new(), run: 0, ..e.clone() };
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| strip(x) == strip(y))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SpeciesTally {
    pub events: usize,
    pub individuals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub event_count: usize,
    pub individual_total: u64,
    pub per_species: BTreeMap<String, SpeciesTally>,
}

pub fn dataset_summary(events: &[Event]) -> DatasetSummary {
    let mut summary = DatasetSummary { event_count: events.len(), ..Default::default() };
    for event in events {
        summary.individual_total += u64::from(event.individual_count);
        let key = event.species.clone().unwrap_or_else(|| UNLABELED.to_string());
        let tally = summary.per_species.entry(key).or_default();
        tally.events += 1;
        tally.individuals += u64::from(event.individual_count);
    }
    summary
}
