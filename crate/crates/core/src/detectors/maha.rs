//! Mahalanobis detector with class means and one pooled (tied) covariance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;

pub const DEFAULT_SHRINKAGE: f64 = 1e-5;

/// Fitted state: per-class means, the shrunk pooled covariance and its
/// Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBank {
    pub dim: usize,
    /// `(class index, mean)` for every class with at least one fit sample.
    pub means: Vec<(usize, Vec<f64>)>,
    /// Row-major `dim x dim`, shrinkage already added to the diagonal.
    pub covariance: Vec<f64>,
    /// Absolute ridge `ε` that was added to the diagonal.
    pub shrinkage: f64,
    #[serde(skip)]
    factor: Option<Cholesky>,
}

impl GaussianBank {
    /// Fits means and `Σ = (1/N) Σ_c Σ_{x∈c} (x-μ_c)(x-μ_c)ᵀ + εI` with
    /// `ε = shrinkage_rel · tr(Σ)/d` (or `shrinkage_rel` when the trace is 0).
    pub fn fit<'a, I>(samples: I, shrinkage_rel: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a [f64])>,
    {
        let samples: Vec<(usize, &[f64])> = samples.into_iter().collect();
        let (_, first) = samples.first().ok_or(Error::EmptyInput("fit set"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::EmptyInput("embedding dimension"));
        }
        if !(shrinkage_rel >= 0.0) || !shrinkage_rel.is_finite() {
            return Err(Error::Config(format!("shrinkage must be >= 0, got {shrinkage_rel}")));
        }
        let num_classes = samples.iter().map(|(c, _)| c + 1).max().unwrap_or(0);
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (class, x) in &samples {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("fit embeddings"));
            }
            counts[*class] += 1;
            for (s, v) in sums[*class].iter_mut().zip(x.iter()) {
                *s += v;
            }
        }
        if counts.iter().all(|&c| c < 2) {
            return Err(Error::DegenerateFit);
        }
        let means: Vec<(usize, Vec<f64>)> = sums
            .into_iter()
            .zip(&counts)
            .enumerate()
            .filter(|(_, (_, &n))| n > 0)
            .map(|(c, (s, &n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        let mut slot = vec![usize::MAX; num_classes];
        for (i, (c, _)) in means.iter().enumerate() {
            slot[*c] = i;
        }

        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for (class, x) in &samples {
            let mu = &means[slot[*class]].1;
            for ((c, xv), m) in centered.iter_mut().zip(x.iter()).zip(mu) {
                *c = xv - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                let row = &mut cov[i * dim..i * dim + i + 1];
                for (r, cj) in row.iter_mut().zip(&centered[..=i]) {
                    *r += ci * cj;
                }
            }
        }
        let n = samples.len() as f64;
        for i in 0..dim {
            for j in 0..=i {
                let v = cov[i * dim + j] / n;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
        let shrinkage = if trace > 0.0 {
            shrinkage_rel * trace / dim as f64
        } else {
            shrinkage_rel
        };
        for i in 0..dim {
            cov[i * dim + i] += shrinkage;
        }
        let factor = Cholesky::factor(&cov, dim)?;
        Ok(GaussianBank {
            dim,
            means,
            covariance: cov,
            shrinkage,
            factor: Some(factor),
        })
    }

    /// Recomputes the factorization, e.g. after deserialization.
    pub fn refactor(&mut self) -> Result<()> {
        self.factor = Some(Cholesky::factor(&self.covariance, self.dim)?);
        Ok(())
    }

    fn factor(&self) -> Result<&Cholesky> {
        self.factor
            .as_ref()
            .ok_or_else(|| Error::Config("Gaussian bank is not factorized".into()))
    }

    /// Squared Mahalanobis distance to the mean of `class_slot`.
    pub fn distance_sq(&self, class_slot: usize, z: &[f64]) -> Result<f64> {
        let mu = &self.means[class_slot].1;
        let diff: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
        Ok(self.factor()?.inv_quadratic_form(&diff))
    }

    /// `-min_c (z-μ_c)ᵀ Σ⁻¹ (z-μ_c)`; higher means more in-distribution.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        let factor = self.factor()?;
        let mut diff = vec![0.0; self.dim];
        let mut best = f64::INFINITY;
        for (_, mu) in &self.means {
            for ((d, a), b) in diff.iter_mut().zip(z).zip(mu) {
                *d = a - b;
            }
            factor.solve_lower_in_place(&mut diff);
            let q: f64 = diff.iter().map(|v| v * v).sum();
            best = best.min(q);
        }
        Ok(-best)
    }
}

pub fn fit_maha<'a, I>(samples: I, shrinkage_rel: f64) -> Result<GaussianBank>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    GaussianBank::fit(samples, shrinkage_rel)
}

pub fn maha_score(bank: &GaussianBank, z: &[f64]) -> Result<f64> {
    bank.score(z)
}
