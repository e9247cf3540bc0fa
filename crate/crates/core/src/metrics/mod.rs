//! Detection metrics, strict-match accuracy, anisotropy and run reports.

mod accuracy;
mod anisotropy;
mod detection;
mod report;

pub use accuracy::{normalize_decoded, strict_match, strict_match_accuracy, EOS_MARKER};
pub use anisotropy::anisotropy;
pub use detection::{aupr, auroc, far_at_95, DetectionMetrics};
pub use report::{MetricRow, MetricsReport, SeedSeries};
