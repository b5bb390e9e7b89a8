//! Desk-scale camera-trap data pipeline.
//!
//! Field media flows through a fixed sequence of stages, each usable on its
//! own: [`ingest`] copies SD cards into dated session folders, [`detect`]
//! reads and writes detector batch JSON and runs detector adapters,
//! [`events`] groups detections into ecological events, [`export`] exchanges
//! label tables with the labeling tool, [`archive`] uploads sessions to a
//! remote store, and [`eval`] scores detector output against human labels.
//! [`synth`] generates corpora with planted ground truth. Everything is
//! recorded in an append-only [`catalog`].

pub mod archive;
pub mod catalog;
pub mod cli;
pub mod detect;
pub mod digest;
pub mod eval;
pub mod events;
pub mod export;
pub mod ingest;
pub mod kv;
pub mod synth;
