//! Logit-based scores: maximum softmax probability and energy.

use serde::{Deserialize, Serialize};

use super::ClassTokenMap;
use crate::error::{Error, Result};

/// How MSP normalizes the class-token probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MspMode {
    /// Softmax over the full vocabulary, then the max over the class tokens.
    #[default]
    FullVocab,
    /// Softmax over the K selected class logits only.
    Renormalized,
}

impl MspMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MspMode::FullVocab => "full_vocab",
            MspMode::Renormalized => "renormalized",
        }
    }
}

impl std::str::FromStr for MspMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full_vocab" => Ok(MspMode::FullVocab),
            "renormalized" => Ok(MspMode::Renormalized),
            other => Err(Error::Config(format!("unknown MSP mode {other:?}"))),
        }
    }
}

fn check_finite(logits: &[f64], what: &'static str) -> Result<()> {
    if logits.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `log Σ exp(x)` with max subtraction.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// MSP from full-vocabulary logits: the largest full-softmax probability among
/// the class first tokens.
pub fn msp_full_vocab(vocab_logits: &[f64], map: &ClassTokenMap) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::EmptyInput("class token map"));
    }
    check_finite(vocab_logits, "vocabulary logits")?;
    let mut best = f64::NEG_INFINITY;
    for (_, tok) in map.entries() {
        let l = *vocab_logits.get(*tok as usize).ok_or(Error::DimensionMismatch {
            expected: *tok as usize + 1,
            got: vocab_logits.len(),
        })?;
        best = best.max(l);
    }
    Ok((best - logsumexp(vocab_logits)).exp())
}

/// MSP from the K selected logits plus the log-partition of the full
/// vocabulary. Equivalent to [`msp_full_vocab`] without holding all logits.
pub fn msp_with_partition(selected: &[f64], log_partition: f64) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::EmptyInput("class logits"));
    }
    check_finite(selected, "class logits")?;
    if !log_partition.is_finite() {
        return Err(Error::NonFinite("log-partition"));
    }
    let best = selected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((best - log_partition).exp().min(1.0))
}

/// MSP with the softmax taken over the K selected logits.
pub fn msp_renormalized(selected: &[f64]) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::EmptyInput("class logits"));
    }
    check_finite(selected, "class logits")?;
    let best = selected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((best - logsumexp(selected)).exp())
}

/// Energy score: `log Σᵢ exp(lᵢ)` over the selected first-token logits.
pub fn energy_score(selected: &[f64]) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::EmptyInput("class logits"));
    }
    check_finite(selected, "class logits")?;
    Ok(logsumexp(selected))
}
