//! Low-rank adapters on the attention projections.
//!
//! Each adapted projection computes `x·W + (α/r)·(x·A)·B` with `A: d×r` and
//! `B: r×d`; `B` starts at zero so a fresh adapter is an exact no-op.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 16, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

/// Adapters for `[q, k, v, o]` of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraWeights {
    pub config: LoraConfig,
    pub blocks: Vec<[LoraPair; 4]>,
}

const NAMES: [&str; 4] = ["q", "k", "v", "o"];

impl LoraWeights {
    pub fn init(cfg: &LoraConfig, d: usize, n_blocks: usize, rng: &mut ChaCha8Rng) -> Self {
        // Kaiming-uniform-like scale for A, as in common LoRA implementations.
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let r = cfg.rank;
        let blocks = (0..n_blocks)
            .map(|_| {
                std::array::from_fn(|_| LoraPair {
                    a: Array2::from_shape_simple_fn((d, r), || dist.sample(rng)),
                    b: Array2::zeros((r, d)),
                })
            })
            .collect();
        LoraWeights { config: *cfg, blocks }
    }

    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn zeros_like(&self) -> Self {
        LoraWeights {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    std::array::from_fn(|i| LoraPair {
                        a: Array2::zeros(b[i].a.raw_dim()),
                        b: Array2::zeros(b[i].b.raw_dim()),
                    })
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (bi, blk) in self.blocks.iter().enumerate() {
            for (pair, name) in blk.iter().zip(NAMES) {
                out.push((
                    format!("lora.{bi}.{name}.a"),
                    pair.a.shape().to_vec(),
                    pair.a.as_slice().unwrap(),
                ));
                out.push((
                    format!("lora.{bi}.{name}.b"),
                    pair.b.shape().to_vec(),
                    pair.b.as_slice().unwrap(),
                ));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for blk in &mut self.blocks {
            for pair in blk.iter_mut() {
                out.push(pair.a.as_slice_mut().unwrap());
                out.push(pair.b.as_slice_mut().unwrap());
            }
        }
        out
    }
}
