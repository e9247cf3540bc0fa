use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-normalized reference embeddings; the score of a query is its largest
/// cosine similarity to any of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineBank {
    pub dim: usize,
    pub bank: Vec<Vec<f64>>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl CosineBank {
    pub fn fit<'a, I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let mut bank = Vec::new();
        let mut dim = None;
        for (id, v) in vectors {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("fit embeddings"));
            }
            let n = norm(v);
            if n == 0.0 {
                return Err(Error::ZeroVector { id: id.to_string() });
            }
            bank.push(v.iter().map(|x| x / n).collect());
        }
        let dim = dim.ok_or(Error::EmptyInput("cosine fit set"))?;
        Ok(CosineBank { dim, bank })
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        let n = norm(z);
        if n == 0.0 {
            return Err(Error::ZeroVector { id: "<query>".into() });
        }
        let best = self
            .bank
            .iter()
            .map(|b| b.iter().zip(z).map(|(u, v)| u * v).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((best / n).clamp(-1.0, 1.0))
    }
}

pub fn fit_cosine<'a, I>(vectors: I) -> Result<CosineBank>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    CosineBank::fit(vectors)
}

pub fn cosine_score(bank: &CosineBank, z: &[f64]) -> Result<f64> {
    bank.score(z)
}
