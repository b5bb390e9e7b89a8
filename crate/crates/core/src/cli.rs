//! Command-line front end. One subcommand per pipeline stage.
//!
//! Settings come from a key=value config file, then command-line flags,
//! then `TRAPLINE_*` environment variables; later sources win. The
//! effective settings are printed to stderr before any command runs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::archive::{self, LocalDirRemote, RemoteConfig, UploadWindow};
use crate::catalog::{Catalog, Category, LabelRecord, MediaKind};
use crate::detect::adapter::{self, DetectorAdapter, StubConfig};
use crate::detect::batch::{merge_batches, parse_md_json, write_md_json, DetectionBatch, ImageEntry};
use crate::eval;
use crate::events::{self, GroupingConfig, KeyField, RepresentativeRule};
use crate::export::{self, CleaningPolicy};
use crate::ingest::{self, ImportOptions};
use crate::kv;
use crate::synth::{self, DetectorNoise, SynthConfig};

pub const CONFIG_FILE: &str = "trapline.conf";
pub const ENV_PREFIX: &str = "TRAPLINE_";
pub const DETECTIONS_SUFFIX: &str = ".detections.json";

/// Keys settable from every source. `adapter.<name>` entries are also
/// accepted from the config file.
const KEYS: [&str; 12] = [
    "catalog",
    "dest",
    "remote",
    "adapter",
    "threshold",
    "gap_minutes",
    "jobs",
    "log_level",
    "throughput",
    "retries",
    "cleaning.remove_flags",
    "cleaning.keep_species",
];

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => m,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

type CmdResult = Result<Output, CliError>;

/// A command's result in both renderings.
struct Output {
    json: Value,
    text: String,
    /// Operational problems that still produced a full result.
    exit_code: i32,
}

impl Output {
    fn ok(json: Value, text: impl Into<String>) -> Self {
        Output { json, text: text.into(), exit_code: 0 }
    }
}

#[derive(Parser, Debug)]
#[command(name = "trapline", version, about = "Camera-trap media pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// Machine-readable output
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    catalog: Option<PathBuf>,
    /// Root under which session folders are created
    #[arg(long, global = true, value_name = "DIR")]
    dest: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    remote: Option<PathBuf>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Animal detection confidence threshold
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Event gap in minutes
    #[arg(long, global = true, value_name = "MINUTES")]
    gap: Option<f64>,
    #[arg(long = "log-level", global = true)]
    log_level: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Copy a memory card into the session tree and catalog it
    Ingest(IngestArgs),
    /// Run a detector over session site folders
    Detect(DetectArgs),
    /// Group animal images into events
    Events(EventsArgs),
    /// Write the label CSV, or import a labeled one
    Export(ExportArgs),
    /// Plan and run uploads to the remote store
    Upload(UploadArgs),
    /// Compare detections with human labels
    Eval(EvalArgs),
    /// Generate a synthetic card and truth files
    Synth(SynthArgs),
    /// Catalog and transfer statistics
    Stats,
    /// Catalog integrity and manifest verification
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    site: String,
    /// Collection date, YYYY-MM-DD
    #[arg(long)]
    date: NaiveDate,
    /// Comma-separated extensions to admit
    #[arg(long, value_delimiter = ',')]
    ext: Vec<String>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    adapter: Option<String>,
    /// Only this session
    #[arg(long)]
    session: Option<String>,
    /// A single site folder instead of whole sessions
    #[arg(long)]
    folder: Option<PathBuf>,
    /// Canned responses for the stub adapter, as a batch JSON file
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Rerun folders that already have a detections file
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EventsArgs {
    /// Also split events by labeled species
    #[arg(long)]
    by_species: bool,
    #[arg(long, default_value = "max_confidence")]
    representative: RepresentativeRule,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// CSV file to write
    #[arg(long, conflicts_with = "import")]
    out: Option<PathBuf>,
    /// Labeled CSV to read back into the catalog
    #[arg(long)]
    import: Option<PathBuf>,
    /// Apply the cleaning policy to imported labels
    #[arg(long)]
    clean: bool,
}

#[derive(Args, Debug)]
struct UploadArgs {
    /// Window start, `YYYY-MM-DD HH:MM`; defaults to now
    #[arg(long)]
    start: Option<String>,
    #[arg(long, default_value_t = 8.0)]
    hours: f64,
    /// Write the plan and stop
    #[arg(long)]
    plan_only: bool,
    /// Also write the plan to this file
    #[arg(long)]
    plan_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labeled CSV; defaults to catalog labels
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Batch JSON files; defaults to catalog detections
    #[arg(long)]
    predictions: Vec<PathBuf>,
    /// Sweep points between 0 and 1
    #[arg(long, default_value_t = 10)]
    sweep: u32,
    /// Sweep CSV output
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    sites: u32,
    #[arg(long, default_value_t = 30)]
    days: u32,
    /// Exact number of triggers
    #[arg(long)]
    triggers: Option<u64>,
    #[arg(long, default_value_t = 0.96)]
    empty_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    visit_rate: f64,
    #[arg(long)]
    start_date: Option<NaiveDate>,
    #[arg(long, default_value_t = 0.0)]
    miss_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    fp_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    count_jitter: f64,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    session: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Source {
    Default,
    File,
    Flag,
    Env,
}

/// Settings after layering, with where each value came from.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub catalog_root: PathBuf,
    pub dest_root: PathBuf,
    pub remote_root: Option<PathBuf>,
    pub adapters: BTreeMap<String, String>,
    pub default_adapter: String,
    pub threshold: f64,
    pub gap_minutes: f64,
    pub cleaning: CleaningPolicy,
    pub jobs: usize,
    pub log_level: log::LevelFilter,
    pub throughput: f64,
    pub retries: u32,
    pub config_file: Option<PathBuf>,
    sources: BTreeMap<String, (String, Source)>,
}

impl RunConfig {
    pub fn render(&self) -> String {
        let mut out = String::from("effective config:\n");
        if let Some(path) = &self.config_file {
            out.push_str(&format!("  (config file {})\n", path.display()));
        }
        for (key, (value, source)) in &self.sources {
            out.push_str(&format!("  {key}={value} [{}]\n", serde_plain(source)));
        }
        out
    }
}

fn serde_plain(source: &Source) -> &'static str {
    match source {
        Source::Default => "default",
        Source::File => "file",
        Source::Flag => "flag",
        Source::Env => "env",
    }
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

fn find_config_file(flag: Option<&Path>, env: &BTreeMap<String, String>) -> Result<Option<PathBuf>, CliError> {
    if let Some(path) = flag {
        if !path.is_file() {
            return Err(CliError::Usage(format!("config file {} not found", path.display())));
        }
        return Ok(Some(path.to_path_buf()));
    }
    let local = PathBuf::from(CONFIG_FILE);
    if local.is_file() {
        return Ok(Some(local));
    }
    let user_dir = env
        .get("XDG_CONFIG_HOME")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| env.get("HOME").map(|h| Path::new(h).join(".config")));
    Ok(user_dir.map(|d| d.join("trapline").join(CONFIG_FILE)).filter(|p| p.is_file()))
}

fn csv_set(value: &str) -> BTreeSet<String> {
    value.split(',').map(|s| s.trim().to_ascii_lowercase()).filter(|s| !s.is_empty()).collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| CliError::Usage(format!("invalid value for {key}: {value:?}")))
}

fn resolve_config(global: &GlobalArgs, env: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    let policy = CleaningPolicy::default();
    let join = |set: &BTreeSet<String>| set.iter().cloned().collect::<Vec<_>>().join(",");
    let mut settings: BTreeMap<String, (String, Source)> = BTreeMap::new();
    let defaults = [
        ("catalog", "catalog".to_string()),
        ("dest", "sessions".to_string()),
        ("adapter", "stub".to_string()),
        ("threshold", adapter::DEFAULT_THRESHOLD.to_string()),
        ("gap_minutes", events::DEFAULT_GAP_MINUTES.to_string()),
        ("jobs", std::thread::available_parallelism().map_or(1, |n| n.get()).to_string()),
        ("log_level", "warn".to_string()),
        ("throughput", RemoteConfig::default().throughput_bytes_per_sec.to_string()),
        ("retries", RemoteConfig::default().max_retries.to_string()),
        ("cleaning.remove_flags", join(&policy.remove_flags)),
        ("cleaning.keep_species", join(&policy.keep_species)),
    ];
    for (k, v) in defaults {
        settings.insert(k.to_string(), (v, Source::Default));
    }

    let config_file = find_config_file(global.config.as_deref(), env)?;
    if let Some(path) = &config_file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (key, value) in kv::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))? {
            if !KEYS.contains(&key.as_str()) && !key.starts_with("adapter.") {
                return Err(CliError::Usage(format!("{}: unknown key {key:?}", path.display())));
            }
            settings.insert(key, (value, Source::File));
        }
    }

    let flags: [(&str, Option<String>); 7] = [
        ("catalog", global.catalog.as_ref().map(|p| p.display().to_string())),
        ("dest", global.dest.as_ref().map(|p| p.display().to_string())),
        ("remote", global.remote.as_ref().map(|p| p.display().to_string())),
        ("jobs", global.jobs.map(|j| j.to_string())),
        ("threshold", global.threshold.map(|t| t.to_string())),
        ("gap_minutes", global.gap.map(|g| g.to_string())),
        ("log_level", global.log_level.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            settings.insert(key.to_string(), (v, Source::Flag));
        }
    }
    for key in KEYS {
        if let Some(v) = env.get(&env_name(key)) {
            settings.insert(key.to_string(), (v.clone(), Source::Env));
        }
    }

    let get = |key: &str| settings.get(key).map(|(v, _)| v.as_str());
    let threshold: f64 = parse_value("threshold", get("threshold").unwrap_or_default())?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let gap_minutes: f64 = parse_value("gap_minutes", get("gap_minutes").unwrap_or_default())?;
    if !(gap_minutes > 0.0 && gap_minutes.is_finite()) {
        return Err(CliError::Usage(format!("gap_minutes must be positive, got {gap_minutes}")));
    }
    let jobs: usize = parse_value("jobs", get("jobs").unwrap_or_default())?;
    let throughput: f64 = parse_value("throughput", get("throughput").unwrap_or_default())?;
    let adapters =
        settings.iter().filter_map(|(k, (v, _))| Some((k.strip_prefix("adapter.")?.to_string(), v.clone()))).collect();
    Ok(RunConfig {
        catalog_root: PathBuf::from(get("catalog").unwrap_or_default()),
        dest_root: PathBuf::from(get("dest").unwrap_or_default()),
        remote_root: get("remote").filter(|s| !s.is_empty()).map(PathBuf::from),
        adapters,
        default_adapter: get("adapter").unwrap_or_default().to_string(),
        threshold,
        gap_minutes,
        cleaning: CleaningPolicy {
            remove_flags: csv_set(get("cleaning.remove_flags").unwrap_or_default()),
            keep_species: csv_set(get("cleaning.keep_species").unwrap_or_default()),
            ..policy
        },
        jobs: jobs.max(1),
        log_level: parse_value("log_level", get("log_level").unwrap_or_default())?,
        throughput,
        retries: parse_value("retries", get("retries").unwrap_or_default())?,
        config_file,
        sources: settings,
    })
}

/// Entry point used by the binary. Returns the process exit code.
pub fn run(argv: &[String], env: &BTreeMap<String, String>) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, env, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with(argv: &[String], env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 { write!(out, "{rendered}") } else { write!(err, "{rendered}") };
            return code;
        }
    };
    let json_mode = cli.global.json;
    let result = resolve_config(&cli.global, env).and_then(|config| {
        let _ = env_logger::Builder::new().filter_level(config.log_level).format_timestamp(None).try_init();
        let _ = write!(err, "{}", config.render());
        dispatch(&cli.command, &config)
    });
    match result {
        Ok(output) => {
            let _ = if json_mode {
                writeln!(out, "{}", serde_json::to_string_pretty(&output.json).expect("json value"))
            } else {
                write!(out, "{}", output.text)
            };
            output.exit_code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            if json_mode {
                let _ = writeln!(out, "{}", json!({"error": e.message(), "exit_code": e.code()}));
            }
            e.code()
        }
    }
}

fn dispatch(command: &Command, config: &RunConfig) -> CmdResult {
    match command {
        Command::Ingest(a) => cmd_ingest(a, config),
        Command::Detect(a) => cmd_detect(a, config),
        Command::Events(a) => cmd_events(a, config),
        Command::Export(a) => cmd_export(a, config),
        Command::Upload(a) => cmd_upload(a, config),
        Command::Eval(a) => cmd_eval(a, config),
        Command::Synth(a) => cmd_synth(a),
        Command::Stats => cmd_stats(config),
        Command::Check(a) => cmd_check(a, config),
    }
}

fn open_catalog(config: &RunConfig) -> Result<Catalog, CliError> {
    Catalog::open(&config.catalog_root).map_err(failed)
}

fn to_json(value: &impl Serialize) -> Value {
    serde_json::to_value(value).expect("serializable")
}

/// Copies are idempotent: a second run of the same card skips every file.
fn cmd_ingest(args: &IngestArgs, config: &RunConfig) -> CmdResult {
    let catalog = open_catalog(config)?;
    let mut options = ImportOptions { jobs: config.jobs, ..Default::default() };
    if !args.ext.is_empty() {
        options.scan.extensions = args.ext.iter().map(|e| e.trim_start_matches('.').to_ascii_lowercase()).collect();
    }
    let report = ingest::import_card(&args.source, &args.site, args.date, &catalog, &config.dest_root, &options)
        .map_err(failed)?;
    let mut text = format!(
        "{}/{}: {} copied ({} bytes), {} duplicates skipped, {} errors in {:.1}s\n",
        report.session_id,
        report.site_id,
        report.files_copied,
        report.bytes_copied,
        report.duplicates_skipped,
        report.errors.len(),
        report.duration_secs
    );
    for e in &report.errors {
        text.push_str(&format!("  {}: {}\n", e.path, e.message));
    }
    let mut output = Output::ok(to_json(&report), text);
    if !report.errors.is_empty() {
        output.exit_code = 1;
    }
    Ok(output)
}

fn build_adapter(
    name: &str,
    spec: Option<&str>,
    responses: Option<&Path>,
    threshold: f64,
) -> Result<DetectorAdapter, CliError> {
    let load = |path: &Path| -> Result<DetectionBatch, CliError> {
        let bytes = std::fs::read(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
        parse_md_json(&bytes).map_err(|e| failed(format!("{}: {e}", path.display())))
    };
    let spec = match (name, spec) {
        (_, Some(spec)) => spec.to_string(),
        ("stub", None) => "stub".to_string(),
        (other, None) => return Err(CliError::Failed(format!("adapter not found: {other}"))),
    };
    let mut adapter = if let Some(template) = spec.strip_prefix("external:") {
        DetectorAdapter::external(template)
    } else if spec == "stub" || spec.starts_with("stub:") {
        let file = responses.map(Path::to_path_buf).or_else(|| spec.strip_prefix("stub:").map(PathBuf::from));
        match file {
            Some(path) => DetectorAdapter::stub(StubConfig::from_batch(0, &load(&path)?)),
            None => DetectorAdapter::stub(StubConfig { positive_rate: 0.04, ..Default::default() }),
        }
    } else {
        return Err(CliError::Usage(format!("adapter {name}: unrecognized spec {spec:?}")));
    };
    adapter.default_threshold = threshold;
    Ok(adapter)
}

fn session_dirs(dest_root: &Path, only: Option<&str>) -> Result<Vec<PathBuf>, CliError> {
    if let Some(session) = only {
        let dir = dest_root.join(session);
        if !dir.is_dir() {
            return Err(failed(format!("session folder {} not found", dir.display())));
        }
        return Ok(vec![dir]);
    }
    let mut dirs = Vec::new();
    if dest_root.is_dir() {
        for entry in std::fs::read_dir(dest_root).map_err(failed)? {
            let path = entry.map_err(failed)?.path();
            let is_session =
                path.file_name().and_then(|n| n.to_str()).and_then(ingest::parse_session_folder_name).is_some();
            if path.is_dir() && is_session {
                dirs.push(path);
            }
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn site_dirs(session_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(session_dir)
        .map_err(failed)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn detections_path(site_dir: &Path) -> PathBuf {
    let site = site_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    site_dir.with_file_name(format!("{site}{DETECTIONS_SUFFIX}"))
}

/// Folders with an existing detections file are skipped unless forced, so
/// reruns do not attach the same detections twice.
fn cmd_detect(args: &DetectArgs, config: &RunConfig) -> CmdResult {
    let name = args.adapter.as_deref().unwrap_or(&config.default_adapter);
    let adapter = build_adapter(
        name,
        config.adapters.get(name).map(String::as_str),
        args.responses.as_deref(),
        config.threshold,
    )?;
    let catalog = open_catalog(config)?;
    let folders = match &args.folder {
        Some(folder) => vec![folder.clone()],
        None => {
            let mut all = Vec::new();
            for session in session_dirs(&config.dest_root, args.session.as_deref())? {
                all.extend(site_dirs(&session)?);
            }
            all
        }
    };
    let mut rows = Vec::new();
    let mut text = String::new();
    for folder in folders {
        let out_path = detections_path(&folder);
        if out_path.exists() && !args.force {
            text.push_str(&format!("{}: skipped, {} exists\n", folder.display(), out_path.display()));
            rows.push(json!({"folder": folder.display().to_string(), "skipped": true}));
            continue;
        }
        let batch = adapter::detect_folder(&adapter, &folder).map_err(failed)?;
        std::fs::write(&out_path, write_md_json(&batch)).map_err(failed)?;
        let summary = adapter::attach_to_catalog(&batch, &folder, &catalog).map_err(failed)?;
        text.push_str(&format!(
            "{}: {} images, {} detections attached, {} unresolved\n",
            folder.display(),
            batch.images.len(),
            summary.detections_appended,
            summary.unresolved_files.len()
        ));
        rows.push(json!({
            "folder": folder.display().to_string(),
            "skipped": false,
            "images": batch.images.len(),
            "output": out_path.display().to_string(),
            "detections_appended": summary.detections_appended,
            "unresolved_files": summary.unresolved_files,
        }));
    }
    if rows.is_empty() {
        text.push_str("no site folders found\n");
    }
    Ok(Output::ok(json!({"adapter": name, "folders": rows}), text))
}

/// A new run is stored only when the grouping differs from the latest one.
fn cmd_events(args: &EventsArgs, config: &RunConfig) -> CmdResult {
    let catalog = open_catalog(config)?;
    let observations = events::collect_observations(&catalog, config.threshold).map_err(failed)?;
    let mut key_fields = vec![KeyField::SiteId];
    if args.by_species {
        key_fields.push(KeyField::Species);
    }
    let grouping =
        GroupingConfig { gap_minutes: config.gap_minutes, key_fields, representative_rule: args.representative };
    let mut grouped = events::group_events(&observations, &grouping).map_err(failed)?;
    let latest = catalog.events().map_err(failed)?;
    let stored = if grouped.is_empty() || events::same_grouping(&grouped, &latest) {
        false
    } else {
        let all = catalog.all_events().map_err(failed)?;
        events::stamp_run(&mut grouped, &all);
        catalog.append(&grouped).map_err(failed)?;
        true
    };
    let summary = events::dataset_summary(&grouped);
    let mut text = format!("{} events\n", summary.event_count);
    if summary.event_count > 0 {
        text.push_str(&format!("{} individuals\n", summary.individual_total));
        for (species, tally) in &summary.per_species {
            text.push_str(&format!("  {species}: {} events, {} individuals\n", tally.events, tally.individuals));
        }
    }
    Ok(Output::ok(
        json!({
            "event_count": summary.event_count,
            "individual_total": summary.individual_total,
            "per_species": to_json(&summary.per_species),
            "gap_minutes": config.gap_minutes,
            "stored_new_run": stored,
        }),
        text,
    ))
}

fn cmd_export(args: &ExportArgs, config: &RunConfig) -> CmdResult {
    let catalog = open_catalog(config)?;
    if let Some(path) = &args.import {
        let import = export::import_timelapse_csv(path).map_err(failed)?;
        let mut records = import.records;
        let unresolved = export::resolve_labels(&mut records, &catalog.assets().map_err(failed)?);
        let mut removed = BTreeMap::new();
        if args.clean {
            let outcome = export::apply_cleaning(&records, &config.cleaning);
            records = export::clean_datetimes(&outcome.kept, &config.cleaning);
            removed = outcome.removed;
        }
        let resolved: Vec<LabelRecord> = records.into_iter().filter(|r| r.asset_id.is_some()).collect();
        catalog.append(&resolved).map_err(failed)?;
        let text = format!(
            "{} labels imported, {} unresolved, {} row issues, {} removed by cleaning\n",
            resolved.len(),
            unresolved.len(),
            import.issues.len(),
            removed.values().sum::<usize>()
        );
        return Ok(Output::ok(
            json!({
                "imported": resolved.len(),
                "unresolved": unresolved.len(),
                "issues": to_json(&import.issues),
                "removed": to_json(&removed),
            }),
            text,
        ));
    }
    let Some(out) = &args.out else {
        return Err(CliError::Usage("export needs --out or --import".into()));
    };
    let events = catalog.events().map_err(failed)?;
    let observations = events::collect_observations(&catalog, config.threshold).map_err(failed)?;
    let rows = export::export_timelapse_csv(&catalog, &events, &observations, out).map_err(failed)?;
    Ok(Output::ok(
        json!({"rows": rows, "events": events.len(), "path": out.display().to_string()}),
        format!("{rows} rows for {} events written to {}\n", events.len(), out.display()),
    ))
}

fn parse_window_start(text: &str) -> Result<NaiveDateTime, CliError> {
    ["%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())
        .ok_or_else(|| CliError::Usage(format!("invalid window start {text:?}")))
}

/// Sessions with a successful upload are never planned again.
fn cmd_upload(args: &UploadArgs, config: &RunConfig) -> CmdResult {
    let start = match &args.start {
        Some(s) => parse_window_start(s)?,
        None => chrono::Local::now().naive_local(),
    };
    if !(args.hours >= 0.0 && args.hours.is_finite()) {
        return Err(CliError::Usage(format!("invalid window length {}", args.hours)));
    }
    let window = UploadWindow { start, end: start + Duration::milliseconds((args.hours * 3_600_000.0) as i64) };
    let remote_config =
        RemoteConfig { throughput_bytes_per_sec: config.throughput, max_retries: config.retries, jobs: config.jobs };
    let catalog = open_catalog(config)?;
    let plan = archive::plan_upload(&catalog, window, &remote_config).map_err(failed)?;
    let rendered = plan.render();
    if let Some(path) = &args.plan_file {
        std::fs::write(path, &rendered).map_err(failed)?;
    }
    if args.plan_only {
        return Ok(Output::ok(json!({"plan": to_json(&plan), "transfers": []}), rendered));
    }
    let Some(remote_root) = &config.remote_root else {
        return Err(CliError::Usage("no remote configured; pass --remote or set remote=".into()));
    };
    let remote = LocalDirRemote::new(remote_root).map_err(failed)?;
    let records =
        archive::execute_upload(&plan, &remote, &catalog, &config.dest_root, &remote_config).map_err(failed)?;
    let mut text = rendered;
    for r in &records {
        text.push_str(&format!(
            "{}: {} after {} attempt(s), {} bytes\n",
            r.payload_path,
            serde_json::to_value(r.outcome).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            r.attempts,
            r.bytes
        ));
    }
    let any_failed = records.iter().any(|r| !r.outcome.succeeded());
    let mut output = Output::ok(json!({"plan": to_json(&plan), "transfers": to_json(&records)}), text);
    if any_failed {
        output.exit_code = 1;
    }
    Ok(output)
}

fn load_batch(path: &Path) -> Result<DetectionBatch, CliError> {
    let bytes = std::fs::read(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    parse_md_json(&bytes).map_err(|e| failed(format!("{}: {e}", path.display())))
}

/// One entry per catalogued image, keyed `<site>/<file>`.
fn catalog_batch(catalog: &Catalog) -> Result<DetectionBatch, CliError> {
    let assets = catalog.assets().map_err(failed)?;
    let mut by_asset: BTreeMap<String, Vec<crate::detect::batch::BatchDetection>> = BTreeMap::new();
    for d in catalog.detections().map_err(failed)? {
        by_asset.entry(d.asset_id.clone()).or_default().push(crate::detect::batch::BatchDetection::new(
            d.category,
            d.confidence,
            d.bbox,
        ));
    }
    let images = assets
        .iter()
        .filter(|a| a.kind == MediaKind::Image)
        .map(|a| ImageEntry::with_detections(a.relative_path.clone(), by_asset.remove(&a.asset_id).unwrap_or_default()))
        .collect();
    Ok(DetectionBatch::new(images))
}

fn cmd_eval(args: &EvalArgs, config: &RunConfig) -> CmdResult {
    let catalog = open_catalog(config)?;
    let assets = catalog.assets().map_err(failed)?;
    let mut labels = match &args.truth {
        Some(path) => export::import_timelapse_csv(path).map_err(failed)?.records,
        None => catalog.labels().map_err(failed)?,
    };
    if labels.is_empty() {
        return Err(failed("no truth labels; pass --truth or import labels first"));
    }
    export::resolve_labels(&mut labels, &assets);
    let truth = eval::truth_from_labels(&labels);

    let predictions = if args.predictions.is_empty() {
        catalog_batch(&catalog)?
    } else {
        let batches = args.predictions.iter().map(|p| load_batch(p)).collect::<Result<Vec<_>, _>>()?;
        merge_batches(&batches).map_err(failed)?
    };
    let report = eval::image_presence_confusion(&predictions, &truth, config.threshold).map_err(failed)?;
    let sweep =
        eval::threshold_sweep(&predictions, &truth, &eval::even_thresholds(args.sweep.max(1))).map_err(failed)?;
    if let Some(path) = &args.report {
        let file = std::fs::File::create(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
        eval::write_report_csv(&sweep, std::io::BufWriter::new(file)).map_err(failed)?;
    }

    // Event recall needs truth events over catalogued assets.
    let by_key: BTreeMap<String, String> =
        assets.iter().map(|a| (a.relative_path.clone(), a.asset_id.clone())).collect();
    let index = eval::PredictionIndex::from_batch(&predictions, |file| {
        let mut rest = file;
        loop {
            if let Some(id) = by_key.get(rest) {
                return Some(id.clone());
            }
            rest = rest.split_once('/')?.1;
        }
    });
    let observations = events::observations_from(&assets, &[], &labels, 1.0);
    let truth_events =
        events::group_events(&observations, &GroupingConfig::with_gap(config.gap_minutes)).map_err(failed)?;
    let event_recall = eval::event_level_recall(&truth_events, &index, config.threshold);

    let (precision, recall) = eval::precision_recall(&report.confusion);
    let text = eval::render_summary(&report, &sweep, Some(event_recall));
    Ok(Output::ok(
        json!({
            "confusion": to_json(&report.confusion),
            "uncovered": report.uncovered,
            "precision": to_json(&precision),
            "recall": to_json(&recall),
            "event_recall": to_json(&event_recall),
            "truth_events": truth_events.len(),
            "sweep": to_json(&sweep),
        }),
        text,
    ))
}

fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        sites: args.sites,
        days: args.days,
        start_date: args.start_date.unwrap_or(defaults.start_date),
        empty_trigger_fraction: args.empty_fraction,
        visit_rate_per_day: args.visit_rate,
        seed: args.seed,
        detector_noise: DetectorNoise {
            miss_rate: args.miss_rate,
            false_positive_rate: args.fp_rate,
            count_jitter: args.count_jitter,
        },
        trigger_target: args.triggers,
        ..defaults
    };
    let dataset = synth::generate_dataset(&config).map_err(|e| CliError::Usage(e.to_string()))?;
    dataset.write_source_tree(&args.out).map_err(failed)?;
    let noisy = config.detector_noise != DetectorNoise::default();
    if noisy {
        let perturbed =
            synth::perturb_detector(&dataset.truth_detections, &config.detector_noise, config.seed).map_err(failed)?;
        std::fs::write(args.out.join(synth::PREDICTIONS_FILE), write_md_json(&perturbed)).map_err(failed)?;
    }
    let summary = &dataset.planted_summary;
    let text = format!(
        "{} triggers over {} sites, animal fraction {:.4}, {} planted events, {} individuals\nsession {} written to {}\n",
        dataset.assets.len(),
        config.sites,
        dataset.animal_fraction(),
        summary.event_count,
        summary.individual_total,
        dataset.session_id,
        args.out.display()
    );
    Ok(Output::ok(
        json!({
            "triggers": dataset.assets.len(),
            "sites": config.site_ids(),
            "session_id": dataset.session_id,
            "collection_date": config.collection_date.unwrap_or(config.start_date + Duration::days(i64::from(config.days))).to_string(),
            "animal_fraction": dataset.animal_fraction(),
            "planted_summary": to_json(summary),
            "predictions_written": noisy,
            "out": args.out.display().to_string(),
        }),
        text,
    ))
}

fn cmd_stats(config: &RunConfig) -> CmdResult {
    let catalog = open_catalog(config)?;
    let assets = catalog.assets().map_err(failed)?;
    let images: BTreeSet<&str> =
        assets.iter().filter(|a| a.kind == MediaKind::Image).map(|a| a.asset_id.as_str()).collect();
    let detected: BTreeSet<String> = catalog
        .detections()
        .map_err(failed)?
        .into_iter()
        .filter(|d| d.category == Category::Animal && d.confidence >= config.threshold)
        .map(|d| d.asset_id)
        .collect();
    let mut labeled: BTreeMap<String, bool> = BTreeMap::new();
    for label in catalog.labels().map_err(failed)? {
        if let Some(id) = &label.asset_id {
            labeled.insert(id.clone(), label.animal_present());
        }
    }
    let detected_images = images.iter().filter(|id| detected.contains(**id)).count();
    let labeled_images = images.iter().filter(|id| labeled.contains_key(**id)).count();
    let labeled_animals = images.iter().filter(|id| labeled.get(**id).copied().unwrap_or(false)).count();
    let detected_fraction = eval::Metric::ratio(detected_images as u64, images.len() as u64);
    let labeled_fraction = eval::Metric::ratio(labeled_animals as u64, labeled_images as u64);

    let transfers = catalog.transfers().map_err(failed)?;
    let by_kind = archive::summarize_by_kind(&transfers);
    let events = catalog.events().map_err(failed)?;
    let summary = events::dataset_summary(&events);
    let counts = catalog.table_counts().map_err(failed)?;

    let mut text = String::new();
    for (table, n) in &counts {
        text.push_str(&format!("{}: {n}\n", table.name()));
    }
    text.push_str(&format!(
        "images: {}, animal fraction by detection {detected_fraction} (threshold {}), by label {labeled_fraction} ({labeled_images} labeled)\n",
        images.len(),
        config.threshold
    ));
    text.push_str(&format!("events: {}, individuals: {}\n", summary.event_count, summary.individual_total));
    for (kind, s) in &by_kind {
        text.push_str(&format!(
            "{}: {} transfers, {} bytes total, avg {:.1} s, max {:.1} s, total {:.1} min\n",
            serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            s.count,
            s.bytes.total,
            s.duration.avg_secs,
            s.duration.max_secs,
            s.duration.total_secs / 60.0
        ));
    }
    Ok(Output::ok(
        json!({
            "tables": to_json(&counts),
            "images": images.len(),
            "threshold": config.threshold,
            "animal_fraction_detected": to_json(&detected_fraction),
            "animal_fraction_labeled": to_json(&labeled_fraction),
            "labeled_images": labeled_images,
            "events": to_json(&summary),
            "transfers": to_json(&by_kind),
            "transfers_all": to_json(&archive::summarize_transfers(&transfers)),
        }),
        text,
    ))
}

fn cmd_check(args: &CheckArgs, config: &RunConfig) -> CmdResult {
    let catalog = open_catalog(config)?;
    let integrity = catalog.integrity_check().map_err(failed)?;
    let mut manifests = BTreeMap::new();
    let mut problems = 0usize;
    for session in session_dirs(&config.dest_root, args.session.as_deref())? {
        let name = session.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match ingest::verify_manifest(&session) {
            Ok(mismatches) => {
                problems += mismatches.len();
                manifests.insert(name, to_json(&mismatches));
            }
            Err(e) => {
                problems += 1;
                manifests.insert(name, json!({"error": e.to_string()}));
            }
        }
    }
    let issue_count = integrity.orphans.len() + integrity.duplicate_keys.len() + integrity.malformed_lines.len();
    let mut text = format!(
        "catalog: {} orphans, {} duplicate keys, {} malformed lines\n",
        integrity.orphans.len(),
        integrity.duplicate_keys.len(),
        integrity.malformed_lines.len()
    );
    for (session, result) in &manifests {
        let status = match result {
            Value::Array(items) if items.is_empty() => "ok".to_string(),
            Value::Array(items) => format!("{} mismatches", items.len()),
            other => other["error"].as_str().unwrap_or("error").to_string(),
        };
        text.push_str(&format!("{session}: {status}\n"));
    }
    let mut output = Output::ok(json!({"integrity": to_json(&integrity), "manifests": manifests}), text);
    if issue_count + problems > 0 {
        output.exit_code = 1;
    }
    Ok(output)
}
