//! Post-hoc OOD score functions. Every score is oriented so that higher means
//! more in-distribution.

mod class_map;
mod cosine;
mod logits;
mod maha;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use class_map::{byte_tokenize, ClassTokenMap};
pub use cosine::{cosine_score, fit_cosine, CosineBank};
pub use logits::{energy_score, logsumexp, msp_full_vocab, msp_renormalized, msp_with_partition, MspMode};
pub use maha::{fit_maha, maha_score, GaussianBank, DEFAULT_SHRINKAGE};

use crate::config::{DatasetManifest, FitSplit};
use crate::dump::{read_dump, EmbeddingDump, EmbeddingRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Maha,
    Cosine,
    Msp,
    Energy,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::Maha,
        DetectorKind::Cosine,
        DetectorKind::Msp,
        DetectorKind::Energy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Maha => "maha",
            DetectorKind::Cosine => "cosine",
            DetectorKind::Msp => "msp",
            DetectorKind::Energy => "energy",
        }
    }

    pub fn is_distance(self) -> bool {
        matches!(self, DetectorKind::Maha | DetectorKind::Cosine)
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maha" | "mahalanobis" => Ok(DetectorKind::Maha),
            "cosine" => Ok(DetectorKind::Cosine),
            "msp" => Ok(DetectorKind::Msp),
            "energy" => Ok(DetectorKind::Energy),
            other => Err(Error::Config(format!("unknown detector {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub msp_mode: MspMode,
    pub shrinkage: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            msp_mode: MspMode::FullVocab,
            shrinkage: DEFAULT_SHRINKAGE,
        }
    }
}

/// A dump plus, optionally, the per-record log-partition of the full
/// vocabulary (needed for full-vocabulary MSP; EDF1 does not carry it).
#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a> {
    pub dump: &'a EmbeddingDump,
    pub log_partition: Option<&'a [f64]>,
}

impl<'a> SplitView<'a> {
    pub fn new(dump: &'a EmbeddingDump) -> Self {
        SplitView {
            dump,
            log_partition: None,
        }
    }

    pub fn with_partition(dump: &'a EmbeddingDump, log_partition: &'a [f64]) -> Self {
        SplitView {
            dump,
            log_partition: Some(log_partition),
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "detector", rename_all = "lowercase")]
pub enum FittedDetector {
    Maha(GaussianBank),
    Cosine(CosineBank),
    Msp { mode: MspMode },
    Energy,
}

impl FittedDetector {
    /// Fits a detector on the labeled ID split. Logit detectors have no state
    /// but still require the split to carry class logits.
    pub fn fit(kind: DetectorKind, fit_split: &EmbeddingDump, params: &DetectorParams) -> Result<Self> {
        match kind {
            DetectorKind::Maha => {
                let vectors: Vec<(usize, Vec<f64>)> = fit_split
                    .records
                    .iter()
                    .map(|r| {
                        r.label
                            .map(|l| (l as usize, to_f64(&r.embedding)))
                            .ok_or_else(|| Error::MissingLabel { id: r.id.clone() })
                    })
                    .collect::<Result<_>>()?;
                let bank = fit_maha(vectors.iter().map(|(c, v)| (*c, v.as_slice())), params.shrinkage)?;
                Ok(FittedDetector::Maha(bank))
            }
            DetectorKind::Cosine => {
                let vectors: Vec<Vec<f64>> = fit_split.records.iter().map(|r| to_f64(&r.embedding)).collect();
                let bank = fit_cosine(
                    fit_split
                        .records
                        .iter()
                        .zip(&vectors)
                        .map(|(r, v)| (r.id.as_str(), v.as_slice())),
                )?;
                Ok(FittedDetector::Cosine(bank))
            }
            DetectorKind::Msp => Ok(FittedDetector::Msp { mode: params.msp_mode }),
            DetectorKind::Energy => Ok(FittedDetector::Energy),
        }
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            FittedDetector::Maha(_) => DetectorKind::Maha,
            FittedDetector::Cosine(_) => DetectorKind::Cosine,
            FittedDetector::Msp { .. } => DetectorKind::Msp,
            FittedDetector::Energy => DetectorKind::Energy,
        }
    }

    pub fn score_record(&self, record: &EmbeddingRecord, log_partition: Option<f64>) -> Result<f64> {
        let logits = || {
            record.class_logits.as_ref().map(|l| to_f64(l)).ok_or_else(|| {
                Error::MissingLogits(format!("{} needs class logits but the dump has K = 0", self.kind()))
            })
        };
        match self {
            FittedDetector::Maha(bank) => bank.score(&to_f64(&record.embedding)),
            FittedDetector::Cosine(bank) => bank.score(&to_f64(&record.embedding)),
            FittedDetector::Energy => energy_score(&logits()?),
            FittedDetector::Msp { mode } => match mode {
                MspMode::Renormalized => msp_renormalized(&logits()?),
                MspMode::FullVocab => {
                    let lp = log_partition.ok_or_else(|| {
                        Error::MissingLogits(
                            "full-vocabulary MSP needs the vocabulary log-partition, which EDF1 dumps \
                             do not carry; use the renormalized MSP mode"
                                .into(),
                        )
                    })?;
                    msp_with_partition(&logits()?, lp)
                }
            },
        }
    }

    pub fn score_split(&self, split: SplitView<'_>) -> Result<Vec<f64>> {
        if let Some(lp) = split.log_partition {
            if lp.len() != split.dump.len() {
                return Err(Error::LengthMismatch {
                    left: lp.len(),
                    right: split.dump.len(),
                });
            }
        }
        split
            .dump
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| self.score_record(r, split.log_partition.map(|lp| lp[i])))
            .collect()
    }
}

/// Scores of one split under one detector, aligned with the record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSplit {
    pub name: String,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSplits {
    pub detector: DetectorKind,
    pub id_test: ScoredSplit,
    pub ood: Vec<ScoredSplit>,
}

impl ScoredSplits {
    pub fn rows(&self) -> Vec<ScoreRow> {
        std::iter::once(&self.id_test)
            .chain(&self.ood)
            .flat_map(|s| {
                s.ids.iter().zip(&s.scores).map(move |(id, score)| ScoreRow {
                    id: id.clone(),
                    split: s.name.clone(),
                    detector: self.detector.as_str().to_string(),
                    score: *score,
                })
            })
            .collect()
    }
}

/// Fits `kind` on `fit` and scores the ID test split and every OOD split.
pub fn score_splits(
    kind: DetectorKind,
    params: &DetectorParams,
    fit: &EmbeddingDump,
    id_test: SplitView<'_>,
    ood: &[(String, SplitView<'_>)],
) -> Result<ScoredSplits> {
    for split in std::iter::once(id_test.dump).chain(ood.iter().map(|(_, s)| s.dump)) {
        if split.dim != fit.dim {
            return Err(Error::DimensionMismatch {
                expected: fit.dim,
                got: split.dim,
            });
        }
    }
    let fitted = FittedDetector::fit(kind, fit, params)?;
    let scored = |name: &str, view: SplitView<'_>| -> Result<ScoredSplit> {
        Ok(ScoredSplit {
            name: name.to_string(),
            ids: view.dump.records.iter().map(|r| r.id.clone()).collect(),
            scores: fitted.score_split(view)?,
        })
    };
    Ok(ScoredSplits {
        detector: kind,
        id_test: scored("id_test", id_test)?,
        ood: ood
            .iter()
            .map(|(name, view)| scored(name, *view))
            .collect::<Result<_>>()?,
    })
}

/// Loads the dumps named by a manifest, fits on its fit split and scores.
/// EDF1 carries no log-partition, so full-vocabulary MSP fails here with
/// [`Error::MissingLogits`].
pub fn score_dump(manifest: &DatasetManifest, kind: DetectorKind, params: &DetectorParams) -> Result<ScoredSplits> {
    let train = read_dump(&manifest.id_train)?;
    let val = read_dump(&manifest.id_val)?;
    let id_test = read_dump(&manifest.id_test)?;
    for other in [&val, &id_test] {
        if other.class_names != train.class_names {
            return Err(Error::Inconsistent("ID splits disagree on class names".into()));
        }
        if other.dim != train.dim {
            return Err(Error::DimensionMismatch {
                expected: train.dim,
                got: other.dim,
            });
        }
    }
    let fit = match manifest.fit_split {
        FitSplit::Train => &train,
        FitSplit::Val => &val,
    };
    let oods: Vec<(String, EmbeddingDump)> = manifest
        .ood
        .iter()
        .map(|o| Ok((o.name.clone(), read_dump(&o.path)?)))
        .collect::<Result<_>>()?;
    let views: Vec<(String, SplitView<'_>)> = oods.iter().map(|(n, d)| (n.clone(), SplitView::new(d))).collect();
    score_splits(kind, params, fit, SplitView::new(&id_test), &views)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub split: String,
    pub detector: String,
    pub score: f64,
}

pub const SCORE_HEADER: &str = "id\tsplit\tdetector\tscore";

/// Writes a score table: a header line, then one tab-separated row per record.
/// Scores use the shortest representation that round-trips.
pub fn write_scores(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(rows.len() * 32 + 32);
    out.push_str(SCORE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.split, r.detector, r.score));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == SCORE_HEADER => {}
        _ => return Err(Error::Config(format!("{}: missing score table header", path.display()))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Config(format!(
                    "{}:{}: expected 4 columns",
                    path.display(),
                    i + 2
                )));
            }
            let score = cols[3]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}:{}: bad score {:?}", path.display(), i + 2, cols[3])))?;
            Ok(ScoreRow {
                id: cols[0].to_string(),
                split: cols[1].to_string(),
                detector: cols[2].to_string(),
                score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump(points: &[(&str, Option<u32>, [f32; 2], [f32; 2])]) -> EmbeddingDump {
        EmbeddingDump {
            dim: 2,
            class_names: vec!["a".into(), "b".into()],
            records: points
                .iter()
                .map(|(id, l, e, g)| EmbeddingRecord {
                    id: id.to_string(),
                    label: *l,
                    embedding: e.to_vec(),
                    class_logits: Some(g.to_vec()),
                })
                .collect(),
        }
    }

    fn clusters() -> (EmbeddingDump, EmbeddingDump, EmbeddingDump) {
        let fit = dump(&[
            ("f0", Some(0), [10.0, 0.5], [3.0, 0.0]),
            ("f1", Some(0), [10.5, -0.5], [3.0, 0.1]),
            ("f2", Some(0), [9.5, 0.0], [2.5, 0.0]),
            ("f3", Some(1), [0.5, 10.0], [0.0, 3.0]),
            ("f4", Some(1), [-0.5, 9.5], [0.2, 2.8]),
            ("f5", Some(1), [0.0, 10.5], [0.0, 3.2]),
        ]);
        let test = dump(&[
            ("t0", Some(0), [10.1, 0.1], [2.9, 0.0]),
            ("t1", Some(1), [0.1, 9.9], [0.0, 3.1]),
        ]);
        let ood = dump(&[
            ("o0", None, [-10.0, -10.0], [0.1, 0.0]),
            ("o1", None, [-9.0, -11.0], [0.0, 0.2]),
        ]);
        (fit, test, ood)
    }

    #[test]
    fn separated_clusters_rank_id_above_ood() {
        let (fit, test, ood) = clusters();
        let params = DetectorParams {
            msp_mode: MspMode::Renormalized,
            ..Default::default()
        };
        for kind in DetectorKind::ALL {
            let s = score_splits(
                kind,
                &params,
                &fit,
                SplitView::new(&test),
                &[("ood".into(), SplitView::new(&ood))],
            )
            .unwrap();
            let min_id = s.id_test.scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max_ood = s.ood[0].scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(min_id > max_ood, "{kind}: {min_id} vs {max_ood}");
        }
    }

    #[test]
    fn full_vocab_msp_needs_partition() {
        let (fit, test, _) = clusters();
        let det = FittedDetector::fit(DetectorKind::Msp, &fit, &DetectorParams::default()).unwrap();
        assert!(matches!(
            det.score_split(SplitView::new(&test)),
            Err(Error::MissingLogits(_))
        ));
        let lp = [5.0, 5.0];
        let s = det.score_split(SplitView::with_partition(&test, &lp)).unwrap();
        assert!((s[0] - (2.9f32 as f64 - 5.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn logit_detectors_need_logits() {
        let (fit, ..) = clusters();
        let mut bare = fit.clone();
        bare.class_names.clear();
        for r in &mut bare.records {
            r.class_logits = None;
        }
        let det = FittedDetector::fit(DetectorKind::Energy, &fit, &DetectorParams::default()).unwrap();
        assert!(matches!(
            det.score_split(SplitView::new(&bare)),
            Err(Error::MissingLogits(_))
        ));
    }

    #[test]
    fn maha_fit_requires_labels() {
        let (_, _, ood) = clusters();
        assert!(matches!(
            FittedDetector::fit(DetectorKind::Maha, &ood, &DetectorParams::default()),
            Err(Error::MissingLabel { .. })
        ));
    }

    #[test]
    fn score_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        let rows = vec![
            ScoreRow {
                id: "a".into(),
                split: "id_test".into(),
                detector: "maha".into(),
                score: -0.1 + 0.2,
            },
            ScoreRow {
                id: "b".into(),
                split: "topic".into(),
                detector: "maha".into(),
                score: -1e-300,
            },
        ];
        write_scores(&p, &rows).unwrap();
        assert_eq!(read_scores(&p).unwrap(), rows);
    }
}
