use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DetectionMetrics;
use crate::error::{Error, Result};

/// Metrics of one (setting, detector, OOD set) cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub setting: String,
    pub detector: String,
    pub ood_set: String,
    /// True when the detector could not be fitted (reported as chance).
    pub degenerate: bool,
    pub per_seed: Vec<DetectionMetrics>,
    pub mean: DetectionMetrics,
}

/// A scalar per seed plus its mean (ID accuracy, anisotropy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSeries {
    pub setting: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

impl SeedSeries {
    pub fn new(setting: impl Into<String>, per_seed: Vec<f64>) -> Self {
        let mean = mean(&per_seed);
        SeedSeries {
            setting: setting.into(),
            per_seed,
            mean,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricRow {
    pub fn new(
        setting: impl Into<String>,
        detector: impl Into<String>,
        ood_set: impl Into<String>,
        degenerate: bool,
        per_seed: Vec<DetectionMetrics>,
    ) -> Self {
        let col = |f: fn(&DetectionMetrics) -> f64| mean(&per_seed.iter().map(f).collect::<Vec<_>>());
        let mean = DetectionMetrics {
            auroc: col(|m| m.auroc),
            far95: col(|m| m.far95),
            aupr: col(|m| m.aupr),
        };
        MetricRow {
            setting: setting.into(),
            detector: detector.into(),
            ood_set: ood_set.into(),
            degenerate,
            per_seed,
            mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: String,
    pub shots: String,
    pub msp_mode: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MetricRow>,
    pub id_accuracy: Vec<SeedSeries>,
    pub anisotropy: Vec<SeedSeries>,
}

impl MetricsReport {
    pub fn row(&self, setting: &str, detector: &str, ood_set: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.detector == detector && r.ood_set == ood_set)
    }

    /// Mean AUROC of a detector over every OOD set of a setting.
    pub fn mean_auroc(&self, setting: &str, detector: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setting == setting && r.detector == detector)
            .map(|r| r.mean.auroc)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    /// Plain-text table: one line per (setting, OOD set, detector).
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "regime={} shots={} msp_mode={} seeds={:?}",
            self.regime, self.shots, self.msp_mode, self.seeds
        );
        let _ = writeln!(
            s,
            "{:<11} {:<12} {:<8} {:>7} {:>7} {:>7}",
            "setting", "ood_set", "detector", "AUROC", "FAR@95", "AUPR"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<11} {:<12} {:<8} {:>7.4} {:>7.4} {:>7.4}{}",
                r.setting,
                r.ood_set,
                r.detector,
                r.mean.auroc,
                r.mean.far95,
                r.mean.aupr,
                if r.degenerate { "  (degenerate fit)" } else { "" }
            );
        }
        for (label, series) in [("id_accuracy", &self.id_accuracy), ("anisotropy", &self.anisotropy)] {
            for x in series {
                let _ = writeln!(s, "{label:<11} {:<12} {:.4}", x.setting, x.mean);
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, body) in [("report.txt", self.to_table()), ("report.json", self.to_json())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
