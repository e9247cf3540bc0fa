//! Out-of-distribution detection for generative classifiers: post-hoc
//! detectors over last-token embeddings and first-class-token logits,
//! detection metrics, a toy byte-level decoder, and a synthetic benchmark
//! harness.

pub mod config;
pub mod detectors;
pub mod dump;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod protocol;
pub mod synth;
pub mod toylm;

pub use config::{DatasetManifest, FitSplit, OodEntry, Regime, RunConfig, Shots};
pub use detectors::{ClassTokenMap, DetectorKind, DetectorParams, FittedDetector, MspMode};
pub use dump::{read_dump, write_dump, EmbeddingDump, EmbeddingRecord};
pub use error::{Error, Result};
pub use metrics::{DetectionMetrics, MetricsReport};
