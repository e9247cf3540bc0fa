//! Threshold-free detection metrics with ID as the positive class.
//!
//! Ties are handled group-atomically: records sharing a score are always
//! processed together, which makes every metric invariant to record order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Id,
    Ood,
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::EmptyInput("ID scores"));
    }
    if ood.is_empty() {
        return Err(Error::EmptyInput("OOD scores"));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    Ok(())
}

/// Per tied score group, descending: (ID count, OOD count).
fn tied_groups_desc(id: &[f64], ood: &[f64]) -> Vec<(u64, u64)> {
    let mut all: Vec<(f64, Role)> = id
        .iter()
        .map(|&s| (s, Role::Id))
        .chain(ood.iter().map(|&s| (s, Role::Ood)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        let (mut n_id, mut n_ood) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal and must share a group.
        while i < all.len() && all[i].0 == s {
            match all[i].1 {
                Role::Id => n_id += 1,
                Role::Ood => n_ood += 1,
            }
            i += 1;
        }
        groups.push((n_id, n_ood));
    }
    groups
}

/// Area under the ROC curve in Mann-Whitney form:
/// `(#{sᵢ > sₒ} + ½·#{sᵢ = sₒ}) / (n_id · n_ood)`, counted exactly in
/// integers over tied groups.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut ood_below = ood.len() as u64;
    let (mut wins, mut ties) = (0u128, 0u128);
    for (n_id, n_ood) in tied_groups_desc(id, ood) {
        ood_below -= n_ood;
        wins += n_id as u128 * ood_below as u128;
        ties += n_id as u128 * n_ood as u128;
    }
    let pairs = id.len() as f64 * ood.len() as f64;
    Ok((wins as f64 + 0.5 * ties as f64) / pairs)
}

/// False alarm rate at 95% TPR. The threshold is the ⌈0.95·n_id⌉-th largest
/// ID score; OOD records scoring at or above it count as false alarms.
pub fn far_at_95(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let n = id.len();
    let rank = (95 * n).div_ceil(100).max(1);
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tau = sorted[rank - 1];
    let accepted = ood.iter().filter(|&&s| s >= tau).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Average precision with ID positive, walking tied groups atomically:
/// `AP = Σ ΔRecall · Precision` over groups that contain ID records.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let n_id = id.len() as f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (g_id, g_ood) in tied_groups_desc(id, ood) {
        tp += g_id;
        fp += g_ood;
        if g_id > 0 {
            ap += (g_id as f64 / n_id) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub far95: f64,
    pub aupr: f64,
}

impl DetectionMetrics {
    pub fn compute(id: &[f64], ood: &[f64]) -> Result<Self> {
        Ok(DetectionMetrics {
            auroc: auroc(id, ood)?,
            far95: far_at_95(id, ood)?,
            aupr: aupr(id, ood)?,
        })
    }

    /// What a detector that cannot be fitted reports: chance AUROC, every OOD
    /// record accepted, and precision equal to the ID prior.
    pub fn degenerate(n_id: usize, n_ood: usize) -> Self {
        DetectionMetrics {
            auroc: 0.5,
            far95: 1.0,
            aupr: n_id as f64 / (n_id + n_ood) as f64,
        }
    }
}
