#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use statrs::distribution::{Binomial, DiscreteCDF};

use trapline::ingest::jpeg_with_exif;

/// Two-sided acceptance region for a Binomial(n, p) count.
pub fn binomial_interval(n: u64, p: f64, coverage: f64) -> (u64, u64) {
    let dist = Binomial::new(p, n).expect("valid binomial");
    let tail = (1.0 - coverage) / 2.0;
    (dist.inverse_cdf(tail), dist.inverse_cdf(1.0 - tail))
}

pub fn within_binomial_ci(successes: u64, n: u64, p: f64) -> bool {
    let (lo, hi) = binomial_interval(n, p, 0.99);
    (lo..=hi).contains(&successes)
}

pub fn at(y: i32, m: u32, d: u32, hh: u32, mm: u32, ss: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(hh, mm, ss).unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

/// Writes `n` distinct JPEGs with EXIF times one minute apart, spread over
/// a nested folder. Returns total bytes.
pub fn write_card(dir: &Path, n: usize) -> u64 {
    let start = at(2024, 4, 20, 6, 0, 0);
    let mut total = 0;
    for i in 0..n {
        let sub = if i % 2 == 0 { dir.to_path_buf() } else { dir.join("DCIM") };
        std::fs::create_dir_all(&sub).unwrap();
        let bytes = jpeg_with_exif(start + chrono::Duration::minutes(i as i64), format!("frame {i}").as_bytes());
        total += bytes.len() as u64;
        std::fs::write(sub.join(format!("IMG_{i:04}.JPG")), bytes).unwrap();
    }
    total
}

pub mod gen {
    use proptest::prelude::*;
    use serde_json::json;

    use trapline::catalog::BoundingBox;
    use trapline::detect::{BatchDetection, BatchInfo, DetectionBatch, ImageEntry};

    pub fn bbox() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(x, y, fw, fh)| BoundingBox::new(x, y, (1.0 - x) * fw, (1.0 - y) * fh))
    }

    pub fn detection() -> impl Strategy<Value = BatchDetection> {
        (prop::sample::select(vec!["1", "2", "3"]), 0.0..=1.0f64, bbox()).prop_map(|(cat, conf, bbox)| BatchDetection {
            category: cat.to_string(),
            conf,
            bbox,
            extra: Default::default(),
        })
    }

    fn entry(index: usize) -> impl Strategy<Value = ImageEntry> {
        let file = format!("S{:02}/IMG_{index:05}.JPG", index % 3 + 1);
        let failed = file.clone();
        prop_oneof![
            8 => (prop::collection::vec(detection(), 0..5), any::<bool>()).prop_map(move |(dets, tagged)| {
                let mut e = ImageEntry::with_detections(file.clone(), dets);
                if tagged {
                    e.extra.insert("max_detection_conf".into(), json!(0.5));
                }
                e
            }),
            1 => Just(ImageEntry::failed(failed, "Failure image access")),
        ]
    }

    pub fn batch() -> impl Strategy<Value = DetectionBatch> {
        let images = (0..12usize).prop_flat_map(|n| (0..n).map(entry).collect::<Vec<_>>());
        let info = (
            prop::option::of("[a-z0-9_.]{1,12}"),
            prop::option::of(Just("1.3".to_string())),
            prop::option::of(Just("2024-05-04T02:11:40".to_string())),
        );
        (images, info).prop_map(|(images, (name, version, generated))| DetectionBatch {
            images,
            info: BatchInfo {
                detector_name: name,
                format_version: version,
                generated_at: generated,
                ..Default::default()
            },
            ..Default::default()
        })
    }
}
