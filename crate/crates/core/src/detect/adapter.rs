//! Detector adapters.
//!
//! An adapter turns a folder of media into a [`DetectionBatch`]. The stub
//! adapter is deterministic and needs no model; the external-process
//! adapter runs a command template such as
//! `md-bridge --input {input_folder} --output {output_json}` and reads the
//! batch JSON the command writes.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{parse_md_json, BatchDetection, BatchError, BatchInfo, DetectionBatch, ImageEntry};
use crate::catalog::{BoundingBox, Catalog, CatalogError, Category, Detection, MediaAsset};
use crate::ingest::{self, IngestError, ScanOptions};

pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60 * 60);

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("default threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error(transparent)]
    Scan(#[from] IngestError),
    #[error("failed to start detector command: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("detector exited with status {status}: {stderr}")]
    ChildFailed { status: String, stderr: String },
    #[error("detector timed out after {0:?}")]
    Timeout(Duration),
    #[error("detector output {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("detector output is not a valid batch: {0}")]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Canned and seeded responses for tests and dry runs.
#[derive(Debug, Clone, Default)]
pub struct StubConfig {
    pub seed: u64,
    /// Fixed detections per file. Keys are matched against the folder-relative
    /// path, then `<folder name>/<path>`.
    pub responses: BTreeMap<String, Vec<BatchDetection>>,
    /// Probability that a file without a canned response gets one animal box.
    pub positive_rate: f64,
}

impl StubConfig {
    /// Uses every image of `batch` as a canned response.
    pub fn from_batch(seed: u64, batch: &DetectionBatch) -> Self {
        StubConfig {
            seed,
            responses: batch
                .images
                .iter()
                .filter(|i| i.failure.is_none())
                .map(|i| (i.file.clone(), i.detections().to_vec()))
                .collect(),
            positive_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    /// Command line with `{input_folder}` and `{output_json}` placeholders,
    /// run through `sh -c`.
    pub command: String,
    pub working_dir: Option<PathBuf>,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub enum AdapterKind {
    Stub(StubConfig),
    ExternalProcess(ExternalConfig),
}

#[derive(Debug, Clone)]
pub struct DetectorAdapter {
    pub kind: AdapterKind,
    pub default_threshold: f64,
}

impl DetectorAdapter {
    pub fn stub(config: StubConfig) -> Self {
        DetectorAdapter { kind: AdapterKind::Stub(config), default_threshold: DEFAULT_THRESHOLD }
    }

    pub fn external(command: impl Into<String>) -> Self {
        DetectorAdapter {
            kind: AdapterKind::ExternalProcess(ExternalConfig {
                command: command.into(),
                working_dir: None,
                timeout: DEFAULT_TIMEOUT,
            }),
            default_threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if !(0.0..=1.0).contains(&self.default_threshold) {
            return Err(DetectError::Threshold(self.default_threshold));
        }
        Ok(())
    }
}

/// Runs the adapter over `folder` and returns its batch, without touching
/// the catalog.
pub fn detect_folder(adapter: &DetectorAdapter, folder: &Path) -> Result<DetectionBatch, DetectError> {
    adapter.validate()?;
    match &adapter.kind {
        AdapterKind::Stub(config) => run_stub(config, folder),
        AdapterKind::ExternalProcess(config) => run_external(config, folder),
    }
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn run_stub(config: &StubConfig, folder: &Path) -> Result<DetectionBatch, DetectError> {
    let folder_name = folder.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let files = ingest::list_media(folder, &ScanOptions::default())?;
    let images = files
        .into_iter()
        .map(|(_, rel, _)| {
            let canned = config.responses.get(&rel).or_else(|| config.responses.get(&format!("{folder_name}/{rel}")));
            let detections = match canned {
                Some(dets) => dets.clone(),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(&rel));
                    if rng.gen::<f64>() < config.positive_rate {
                        let w = rng.gen_range(0.05..0.5);
                        let h = rng.gen_range(0.05..0.5);
                        let x = rng.gen_range(0.0..1.0 - w);
                        let y = rng.gen_range(0.0..1.0 - h);
                        let conf = rng.gen_range(0.2..1.0);
                        vec![BatchDetection::new(Category::Animal, conf, BoundingBox::new(x, y, w, h))]
                    } else {
                        Vec::new()
                    }
                }
            };
            ImageEntry::with_detections(rel, detections)
        })
        .collect();
    Ok(DetectionBatch {
        images,
        info: BatchInfo {
            format_version: Some("1.3".into()),
            detector_name: Some(format!("stub-seed-{}", config.seed)),
            ..Default::default()
        },
        ..Default::default()
    })
}

fn shell_quote(text: &str) -> String {
    format!("'{}'", text.replace('\'', r"'\''"))
}

/// Substitutes the placeholders, shell-quoting the paths.
pub fn render_command(template: &str, input_folder: &Path, output_json: &Path) -> String {
    template
        .replace("{input_folder}", &shell_quote(&input_folder.to_string_lossy()))
        .replace("{output_json}", &shell_quote(&output_json.to_string_lossy()))
}

fn run_external(config: &ExternalConfig, folder: &Path) -> Result<DetectionBatch, DetectError> {
    let scratch = tempfile::tempdir()?;
    let output = scratch.path().join("detections.json");
    let command = render_command(&config.command, folder, &output);
    log::info!("running detector: {command}");

    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg(&command).stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
    if let Some(dir) = &config.working_dir {
        cmd.current_dir(dir);
    }
    let mut child = cmd.spawn().map_err(DetectError::Spawn)?;

    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut sink = Vec::new();
        let _ = stdout.read_to_end(&mut sink);
        sink
    });
    let err_reader = std::thread::spawn(move || {
        let mut text = String::new();
        let _ = stderr.read_to_string(&mut text);
        text
    });

    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= config.timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(DetectError::Timeout(config.timeout));
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    let _ = out_reader.join();
    let stderr = err_reader.join().unwrap_or_default();
    if !status.success() {
        let status = status.code().map_or_else(|| status.to_string(), |c| c.to_string());
        return Err(DetectError::ChildFailed { status, stderr: stderr.trim().to_string() });
    }
    let bytes = std::fs::read(&output).map_err(|source| DetectError::Output { path: output.clone(), source })?;
    Ok(parse_md_json(&bytes)?)
}

/// Outcome of joining a folder batch to catalog assets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttachSummary {
    pub detections_appended: usize,
    pub images_matched: usize,
    pub unresolved_files: Vec<String>,
}

/// Strips a `#<seconds>` frame suffix used for sampled video frames.
pub fn parent_file(file: &str) -> &str {
    match file.rsplit_once('#') {
        Some((parent, secs)) if secs.parse::<f64>().is_ok() => parent,
        _ => file,
    }
}

/// Appends the batch's detections to the catalog. The folder is taken to be
/// `<dest_root>/<session>/<site>`, so batch paths resolve to assets with
/// `session_id = <session>` and `relative_path = <site>/<file>`.
pub fn attach_to_catalog(
    batch: &DetectionBatch,
    folder: &Path,
    catalog: &Catalog,
) -> Result<AttachSummary, DetectError> {
    let site = folder.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let session =
        folder.parent().and_then(Path::file_name).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let assets: HashMap<String, MediaAsset> = catalog
        .read::<MediaAsset>()?
        .into_iter()
        .filter(|a| a.session_id == session)
        .map(|a| (a.relative_path.clone(), a))
        .collect();

    let mut summary = AttachSummary::default();
    let mut detections = Vec::new();
    for image in &batch.images {
        let key = format!("{site}/{}", parent_file(&image.file));
        let Some(asset) = assets.get(&key) else {
            summary.unresolved_files.push(image.file.clone());
            continue;
        };
        summary.images_matched += 1;
        for det in image.detections() {
            let Some(category) = det.category() else {
                log::warn!("{}: skipping detection with category {:?}", image.file, det.category);
                continue;
            };
            detections.push(Detection {
                asset_id: asset.asset_id.clone(),
                category,
                confidence: det.conf,
                bbox: det.bbox,
            });
        }
    }
    if !summary.unresolved_files.is_empty() {
        log::warn!("{} batch entries in {} have no catalog asset", summary.unresolved_files.len(), folder.display());
    }
    summary.detections_appended = catalog.append(&detections)?;
    Ok(summary)
}

/// Runs the adapter over one site folder and records the detections.
pub fn run_detector(
    adapter: &DetectorAdapter,
    folder: &Path,
    catalog: &Catalog,
) -> Result<DetectionBatch, DetectError> {
    let batch = detect_folder(adapter, folder)?;
    attach_to_catalog(&batch, folder, catalog)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting_survives_spaces_and_quotes() {
        let cmd = render_command("run {input_folder} {output_json}", Path::new("/a b/it's"), Path::new("/o.json"));
        assert_eq!(cmd, r"run '/a b/it'\''s' '/o.json'");
    }

    #[test]
    fn frame_suffix() {
        assert_eq!(parent_file("clip.mp4#12.5"), "clip.mp4");
        assert_eq!(parent_file("a#b.jpg"), "a#b.jpg");
        assert_eq!(parent_file("plain.jpg"), "plain.jpg");
    }

    #[test]
    fn stub_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.jpg", "b.jpg", "c.jpg"] {
            std::fs::write(dir.path().join(name), name).unwrap();
        }
        let adapter = DetectorAdapter::stub(StubConfig { seed: 42, positive_rate: 0.5, ..Default::default() });
        let first = detect_folder(&adapter, dir.path()).unwrap();
        let second = detect_folder(&adapter, dir.path()).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.images.len(), 3);
    }

    #[test]
    fn bad_threshold_rejected() {
        let mut adapter = DetectorAdapter::stub(StubConfig::default());
        adapter.default_threshold = 1.5;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(detect_folder(&adapter, dir.path()), Err(DetectError::Threshold(_))));
    }
}
