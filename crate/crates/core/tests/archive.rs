mod common;

use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use proptest::prelude::*;

use trapline::archive::*;
use trapline::catalog::{Catalog, TransferKind, TransferOutcome, TransferRecord};
use trapline::ingest::{import_card, ImportOptions};

struct Fixture {
    _dir: tempfile::TempDir,
    catalog: Catalog,
    dest: std::path::PathBuf,
    remote_root: std::path::PathBuf,
}

/// Two sessions: a 6-image card on 3 May and two small files on 10 May.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::open(dir.path().join("catalog")).unwrap();
    let dest = dir.path().join("sessions");
    let big = dir.path().join("card3");
    common::write_card(&big, 6);
    let small = dir.path().join("card10");
    std::fs::create_dir_all(&small).unwrap();
    for i in 0..2u8 {
        std::fs::write(small.join(format!("RCNX_20240509_12000{i}.JPG")), vec![i; 200]).unwrap();
    }
    for (day, card, site) in [(3, &big, "S01"), (10, &small, "S02")] {
        let date = NaiveDate::from_ymd_opt(2024, 5, day).unwrap();
        import_card(card, site, date, &catalog, &dest, &ImportOptions::default()).unwrap();
    }
    let remote_root = dir.path().join("remote");
    Fixture { _dir: dir, catalog, dest, remote_root }
}

fn window(minutes: i64) -> UploadWindow {
    let start = common::at(2024, 5, 11, 20, 0, 0);
    UploadWindow { start, end: start + Duration::minutes(minutes) }
}

fn slow(bytes_per_sec: f64) -> RemoteConfig {
    RemoteConfig { throughput_bytes_per_sec: bytes_per_sec, ..Default::default() }
}

#[test]
fn plan_orders_largest_first_and_truncates() {
    let f = fixture();
    let plan = plan_upload(&f.catalog, window(60), &RemoteConfig::default()).unwrap();
    let ids: Vec<_> = plan.items.iter().map(|i| i.session_id.as_str()).collect();
    assert_eq!(ids, ["3May2024", "10May2024"]);
    assert!(plan.items[0].bytes > plan.items[1].bytes);
    assert!(plan.notes.is_empty());
    let total: u64 = f.catalog.assets().unwrap().iter().map(|a| a.size_bytes).sum();
    assert_eq!(plan.bytes(), total);

    // Only the smaller session would fit in this window, but the cut
    // is a prefix of the largest-first order, so nothing is planned.
    let small = plan.items[1].bytes as f64;
    let tight = plan_upload(&f.catalog, window(1), &slow(small / 61.0)).unwrap();
    assert!(tight.items.is_empty());
    assert_eq!(tight.deferred.len(), 2);
    assert_eq!(tight.notes, ["window too small for any pending session"]);

    let large = plan.items[0].bytes as f64;
    let one = plan_upload(&f.catalog, window(1), &slow(large / 59.0)).unwrap();
    assert_eq!(one.items.len(), 1);
    assert_eq!(one.deferred[0].session_id, "10May2024");
    assert_eq!(one.notes, ["1 session(s) deferred to a later window"]);
    assert!(one.render().contains("deferred: 10May2024"));
}

#[test]
fn bad_windows_and_throughput_are_rejected() {
    let f = fixture();
    let w = window(10);
    let reversed = UploadWindow { start: w.end, end: w.start };
    assert!(matches!(plan_upload(&f.catalog, reversed, &RemoteConfig::default()), Err(ArchiveError::BadWindow { .. })));
    assert!(matches!(plan_upload(&f.catalog, w, &slow(0.0)), Err(ArchiveError::BadThroughput(_))));
}

fn remote_files(root: &Path) -> Vec<String> {
    LocalDirRemote::new(root).unwrap().list("").unwrap()
}

#[test]
fn upload_copies_verifies_and_is_not_repeated() {
    let f = fixture();
    let remote = LocalDirRemote::new(&f.remote_root).unwrap();
    let config = RemoteConfig { jobs: 3, ..Default::default() };
    let plan = plan_upload(&f.catalog, window(60), &config).unwrap();
    let records = execute_upload(&plan, &remote, &f.catalog, &f.dest, &config).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r.outcome, TransferOutcome::Ok);
        assert_eq!(r.attempts, 1);
        assert_eq!(r.kind, TransferKind::RemoteUpload);
    }

    // Every local file, manifests included, is on the remote with equal bytes.
    let mut local: Vec<String> = walkdir::WalkDir::new(&f.dest)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(&f.dest).unwrap().to_string_lossy().replace('\\', "/"))
        .collect();
    local.sort();
    assert_eq!(remote_files(&f.remote_root), local);
    for rel in &local {
        assert_eq!(std::fs::read(f.dest.join(rel)).unwrap(), std::fs::read(f.remote_root.join(rel)).unwrap());
    }
    assert!(remote_files(&f.remote_root).iter().all(|p| !p.ends_with(".partial")));

    let again = plan_upload(&f.catalog, window(60), &config).unwrap();
    assert!(again.items.is_empty() && again.deferred.is_empty());
}

fn single_session_plan(f: &Fixture) -> UploadPlan {
    let mut plan = plan_upload(&f.catalog, window(60), &RemoteConfig::default()).unwrap();
    plan.items.truncate(1);
    plan
}

#[test]
fn transient_put_failure_is_retried() {
    let f = fixture();
    let remote = FaultInjectingRemote::new(LocalDirRemote::new(&f.remote_root).unwrap(), 1, 0);
    let records =
        execute_upload(&single_session_plan(&f), &remote, &f.catalog, &f.dest, &RemoteConfig::default()).unwrap();
    assert_eq!((records[0].outcome, records[0].attempts), (TransferOutcome::RetriedOk, 2));
}

#[test]
fn corrupt_read_back_is_retried() {
    let f = fixture();
    let remote = FaultInjectingRemote::new(LocalDirRemote::new(&f.remote_root).unwrap(), 0, 1);
    let records =
        execute_upload(&single_session_plan(&f), &remote, &f.catalog, &f.dest, &RemoteConfig::default()).unwrap();
    assert_eq!((records[0].outcome, records[0].attempts), (TransferOutcome::RetriedOk, 2));
}

#[test]
fn persistent_failure_is_logged_and_session_stays_pending() {
    let f = fixture();
    let remote = FaultInjectingRemote::always_failing(LocalDirRemote::new(&f.remote_root).unwrap());
    let plan = single_session_plan(&f);
    let records = execute_upload(&plan, &remote, &f.catalog, &f.dest, &RemoteConfig::default()).unwrap();
    assert_eq!((records[0].outcome, records[0].attempts), (TransferOutcome::Failed, 3));
    assert_eq!(f.catalog.transfers().unwrap().last().unwrap(), &records[0]);
    let next = plan_upload(&f.catalog, window(60), &RemoteConfig::default()).unwrap();
    assert!(next.items.iter().any(|i| i.session_id == plan.items[0].session_id));
}

#[test]
fn tampered_source_is_not_uploaded() {
    let f = fixture();
    let plan = single_session_plan(&f);
    let session = f.dest.join(&plan.items[0].session_id).join("S01");
    std::fs::write(session.join("IMG_0000.JPG"), b"swapped").unwrap();
    let remote = LocalDirRemote::new(&f.remote_root).unwrap();
    let records = execute_upload(&plan, &remote, &f.catalog, &f.dest, &RemoteConfig::default()).unwrap();
    assert_eq!((records[0].outcome, records[0].attempts, records[0].bytes), (TransferOutcome::Failed, 1, 0));
    assert!(remote_files(&f.remote_root).is_empty());
}

#[test]
fn remote_paths_cannot_escape_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let remote = LocalDirRemote::new(dir.path().join("r")).unwrap();
    let src = dir.path().join("f");
    std::fs::write(&src, b"x").unwrap();
    assert!(remote.put_file("../escape", &src).is_err());
    assert!(remote.put_file("a//b", &src).is_err());
    assert!(!dir.path().join("escape").exists());
}

fn arb_transfer() -> impl Strategy<Value = TransferRecord> {
    (
        prop::sample::select(vec![TransferKind::CardImport, TransferKind::RemoteUpload]),
        0u64..10_000_000_000,
        0i64..10_000_000,
        0i64..50_000_000,
    )
        .prop_map(|(kind, bytes, start_ms, dur_ms)| {
            let started_at: NaiveDateTime = common::at(2024, 1, 1, 0, 0, 0) + Duration::milliseconds(start_ms);
            TransferRecord {
                transfer_id: format!("t{start_ms}-{dur_ms}"),
                kind,
                payload_path: "3May2024".into(),
                bytes,
                started_at,
                finished_at: started_at + Duration::milliseconds(dur_ms),
                outcome: TransferOutcome::Ok,
                attempts: 1,
            }
        })
}

fn brute_force(records: &[TransferRecord]) -> (usize, u64, u64, u64, f64, f64, f64, f64) {
    let bytes: Vec<u64> = records.iter().map(|r| r.bytes).collect();
    let secs: Vec<f64> =
        records.iter().map(|r| (r.finished_at - r.started_at).num_milliseconds() as f64 / 1000.0).collect();
    let total_bytes: u64 = bytes.iter().sum();
    let total_secs: f64 = secs.iter().sum();
    (
        records.len(),
        *bytes.iter().min().unwrap(),
        *bytes.iter().max().unwrap(),
        total_bytes,
        secs.iter().cloned().fold(f64::INFINITY, f64::min),
        secs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        total_secs,
        total_secs / records.len() as f64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn stats_match_a_brute_force_fold(records in prop::collection::vec(arb_transfer(), 1..60)) {
        let s = summarize_transfers(&records);
        let (n, bmin, bmax, btotal, dmin, dmax, dtotal, davg) = brute_force(&records);
        prop_assert_eq!((s.count, s.bytes.min, s.bytes.max, s.bytes.total), (n, bmin, bmax, btotal));
        prop_assert!((s.bytes.avg - btotal as f64 / n as f64).abs() <= 1e-6 * s.bytes.avg.max(1.0));
        prop_assert!((s.duration.min_secs - dmin).abs() < 1e-6);
        prop_assert!((s.duration.max_secs - dmax).abs() < 1e-6);
        prop_assert!((s.duration.total_secs - dtotal).abs() < 1e-3);
        prop_assert!((s.duration.avg_secs - davg).abs() < 1e-6 * davg.max(1.0));

        let by_kind = summarize_by_kind(&records);
        prop_assert_eq!(by_kind.values().map(|k| k.count).sum::<usize>(), n);
        prop_assert_eq!(by_kind.values().map(|k| k.bytes.total).sum::<u64>(), btotal);
    }
}

#[test]
fn empty_log_summarizes_to_zero() {
    assert_eq!(summarize_transfers(&[]), TransferStats::default());
    assert!(summarize_by_kind(&[]).is_empty());
}
