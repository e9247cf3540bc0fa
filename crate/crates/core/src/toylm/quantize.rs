//! Simulated reduced-precision storage of extracted vectors.

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::dump::EmbeddingDump;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F16Sim,
    Int8Sim,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::F32, Precision::F16Sim, Precision::Int8Sim];

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F16Sim => "f16_sim",
            Precision::Int8Sim => "int8_sim",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown precision {s:?} (expected f32, f16_sim or int8_sim)")))
    }
}

fn round_f16(v: &mut [f32]) {
    for x in v {
        *x = f16::from_f32(*x).to_f32();
    }
}

/// Symmetric 8-bit quantize/dequantize with one scale per vector.
fn round_int8(v: &mut [f32]) {
    let max = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() {
        return;
    }
    let scale = max / 127.0;
    for x in v {
        *x = (*x / scale).round().clamp(-127.0, 127.0) * scale;
    }
}

/// Returns a copy of `dump` whose embeddings and class logits have been
/// rounded through the given precision.
pub fn quantize_sim(dump: &EmbeddingDump, mode: Precision) -> EmbeddingDump {
    let mut out = dump.clone();
    let op: fn(&mut [f32]) = match mode {
        Precision::F32 => return out,
        Precision::F16Sim => round_f16,
        Precision::Int8Sim => round_int8,
    };
    for rec in &mut out.records {
        op(&mut rec.embedding);
        if let Some(l) = rec.class_logits.as_mut() {
            op(l);
        }
    }
    out
}
