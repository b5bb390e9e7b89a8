//! Detection stage: batch JSON codec, confidence filtering, batch merging,
//! and detector adapters.

pub mod adapter;
pub mod batch;

pub use adapter::{
    attach_to_catalog, detect_folder, parent_file, run_detector, AdapterKind, AttachSummary, DetectError,
    DetectorAdapter, ExternalConfig, StubConfig, DEFAULT_THRESHOLD,
};
pub use batch::{
    default_categories, filter_by_confidence, merge_batches, parse_md_json, validate_batch, write_md_json,
    BatchDetection, BatchError, BatchInfo, BatchOpError, DetectionBatch, ImageEntry, Issue,
};
