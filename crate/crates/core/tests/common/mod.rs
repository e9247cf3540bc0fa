//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use llmood::toylm::{loss_and_grads, loss_only, Example, LoraConfig, ModelConfig, ToyLm, TuningMode};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Direct O(n²) pair count.
pub fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                s += 1.0;
            } else if a == b {
                s += 0.5;
            }
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// Scores drawn from a small grid so that ties are common.
pub fn tied_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..25) as f64 / 4.0 - 3.0).collect()
}

/// A uniformly random orthogonal matrix (QR of a Gaussian matrix with the
/// sign of R's diagonal folded into Q).
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn rotate(q: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let x = DMatrix::from_column_slice(v.len(), 1, v);
    (q * x).as_slice().to_vec()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        ff_mult: 4,
        context: 48,
        init_std: 0.3,
    }
}

/// Largest per-group relative error between analytic gradients and central
/// finite differences, for one example in one configuration.
pub struct GradCheck {
    pub group: String,
    pub rel_err: f64,
}

/// Relative error `|a - n| / max(|a|, |n|)` over each parameter tensor,
/// with a floor for groups whose gradient is identically zero.
pub fn gradient_check(model: &ToyLm, ex: &Example, classes: &[String], mode: TuningMode, h: f64) -> Vec<GradCheck> {
    let (_, grads) = loss_and_grads(model, ex, classes, mode).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, _, v)| (n, v.to_vec())).collect();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (t, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for i in 0..a.len() {
            let orig = probe.trainable_mut()[t][i];
            probe.trainable_mut()[t][i] = orig + h;
            let up = loss_only(&probe, ex, classes, mode).unwrap();
            probe.trainable_mut()[t][i] = orig - h;
            let down = loss_only(&probe, ex, classes, mode).unwrap();
            probe.trainable_mut()[t][i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel_err = if scale < 1e-12 { diff } else { diff / scale };
        out.push(GradCheck {
            group: name.clone(),
            rel_err,
        });
    }
    out
}

/// Gradient checks over full fine-tuning and LoRA, each with the generative
/// loss and with a classifier head, of a d_model=8, single-block model.
pub fn gradient_check_all() -> Vec<(String, GradCheck)> {
    let classes = vec!["positive".to_string(), "negative".to_string()];
    let ex = Example {
        id: "g".into(),
        text: "so good".into(),
        label: 1,
    };
    let mut out = Vec::new();

    let base = ToyLm::new(tiny_config(), 11).unwrap();
    for c in gradient_check(&base, &ex, &classes, TuningMode::Generative, 1e-3) {
        out.push(("full/generative".to_string(), c));
    }

    let mut full_disc = base.clone();
    full_disc.attach_classifier(2, 9);
    for c in gradient_check(&full_disc, &ex, &classes, TuningMode::Discriminative, 1e-3) {
        out.push(("full/discriminative".to_string(), c));
    }

    let mut lora = base.clone();
    lora.attach_lora(LoraConfig { rank: 2, alpha: 4.0 }, 3).unwrap();
    // Move B away from zero so every adapter path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for blk in &mut lora.lora.as_mut().unwrap().blocks {
        for pair in blk.iter_mut() {
            pair.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    for c in gradient_check(&lora, &ex, &classes, TuningMode::Generative, 1e-3) {
        out.push(("lora/generative".to_string(), c));
    }

    let mut disc = lora.clone();
    disc.attach_classifier(2, 9);
    for c in gradient_check(&disc, &ex, &classes, TuningMode::Discriminative, 1e-3) {
        out.push(("lora/discriminative".to_string(), c));
    }
    out
}
