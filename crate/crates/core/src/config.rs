//! TOML documents describing datasets and runs.
//!
//! A dataset manifest:
//!
//! ```toml
//! id_train = "train.edf"
//! id_val = "val.edf"
//! id_test = "test.edf"
//! fit_split = "train"          # or "val"
//!
//! [[ood]]
//! name = "topic"
//! path = "ood_topic.edf"
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::detectors::{DetectorKind, MspMode, DEFAULT_SHRINKAGE};
use crate::error::{Error, Result};
use crate::synth::SplitSizes;
use crate::toylm::{AdamWConfig, ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitSplit {
    #[default]
    Train,
    Val,
}

impl FitSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            FitSplit::Train => "train",
            FitSplit::Val => "val",
        }
    }
}

impl FromStr for FitSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(FitSplit::Train),
            "val" => Ok(FitSplit::Val),
            other => Err(Error::Config(format!("fit split must be train or val, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub id_train: PathBuf,
    pub id_val: PathBuf,
    pub id_test: PathBuf,
    #[serde(default)]
    pub fit_split: FitSplit,
    #[serde(default)]
    pub ood: Vec<OodEntry>,
}

impl DatasetManifest {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        fix(&mut m.id_train);
        fix(&mut m.id_val);
        fix(&mut m.id_test);
        for o in &mut m.ood {
            fix(&mut o.path);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, dir)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for o in &self.ood {
            if o.name.is_empty() || o.name.contains(['\t', '\n']) {
                return Err(Error::Config(format!("invalid OOD set name {:?}", o.name)));
            }
            if matches!(o.name.as_str(), "id_test" | "id_train" | "id_val") {
                return Err(Error::Config(format!("OOD set name {:?} is reserved", o.name)));
            }
            if !names.insert(o.name.as_str()) {
                return Err(Error::Config(format!("duplicate OOD set name {:?}", o.name)));
            }
        }
        Ok(())
    }
}

/// Few-shot setting: k examples per class in both train and val, or all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Shots {
    K(usize),
    #[default]
    Full,
}

impl Shots {
    pub const STANDARD: [Shots; 4] = [Shots::K(1), Shots::K(5), Shots::K(10), Shots::Full];

    pub fn per_class(self) -> Option<usize> {
        match self {
            Shots::K(k) => Some(k),
            Shots::Full => None,
        }
    }
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::K(k) => write!(f, "{k}"),
            Shots::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Shots {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Shots::Full),
            _ => match s.parse::<usize>() {
                Ok(k @ (1 | 5 | 10)) => Ok(Shots::K(k)),
                _ => Err(Error::Config(format!("shots must be 1, 5, 10 or full, got {s:?}"))),
            },
        }
    }
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::K(k) => s.serialize_u64(*k as u64),
            Shots::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(k) => k.to_string(),
            Raw::Str(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Which synthetic benchmark a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    Far,
    Near,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Far => "far",
            Regime::Near => "near",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "far" => Ok(Regime::Far),
            "near" => Ok(Regime::Near),
            other => Err(Error::Config(format!("regime must be far or near, got {other:?}"))),
        }
    }
}

/// Language-model pretraining of the shared base model on a general corpus
/// covering every grammar (see `synth::pretraining_corpus`). The zero-grad
/// setting evaluates this base directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Zero disables pretraining: the base model is the random init.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of documents sampled for the pretraining corpus.
    pub corpus_size: usize,
    /// Fraction of templated (prompt plus domain answer) documents.
    pub templated: f64,
    /// Seed of the base model and its corpus, shared by every run seed.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3,
            lr: 3e-3,
            batch_size: 16,
            corpus_size: 3000,
            templated: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub shots: Shots,
    pub regime: Regime,
    pub detectors: Vec<DetectorKind>,
    pub msp_mode: MspMode,
    pub shrinkage: f64,
    pub out_dir: PathBuf,
    /// Fit split for the zero-grad setting.
    pub zero_grad_fit: FitSplit,
    /// Fit split for the fine-tuned setting.
    pub fine_tuned_fit: FitSplit,
    /// Record OOD metrics after every epoch (slower).
    pub epoch_curves: bool,
    /// Split sizes of the synthetic task; regime defaults when absent.
    pub data: Option<SplitSizes>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![1, 2, 3, 4, 5],
            shots: Shots::Full,
            regime: Regime::Far,
            detectors: DetectorKind::ALL.to_vec(),
            msp_mode: MspMode::FullVocab,
            shrinkage: DEFAULT_SHRINKAGE,
            out_dir: PathBuf::from("out"),
            zero_grad_fit: FitSplit::Val,
            fine_tuned_fit: FitSplit::Train,
            epoch_curves: false,
            data: None,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                epochs: 30,
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn split_sizes(&self) -> SplitSizes {
        self.data.clone().unwrap_or_else(|| SplitSizes::for_regime(self.regime))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("detectors must not be empty".into()));
        }
        if !(self.shrinkage >= 0.0) {
            return Err(Error::Config("shrinkage must be non-negative".into()));
        }
        if let Some(d) = &self.data {
            if d.train_per_class == 0 || d.val_per_class == 0 || d.test_per_class == 0 || d.ood_per_set == 0 {
                return Err(Error::Config("split sizes must be positive".into()));
            }
        }
        let p = &self.pretrain;
        if !(0.0..=1.0).contains(&p.templated) || !(p.lr > 0.0) || p.batch_size == 0 {
            return Err(Error::Config(
                "pretrain needs lr > 0, batch_size > 0 and templated in [0, 1]".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()
    }
}
