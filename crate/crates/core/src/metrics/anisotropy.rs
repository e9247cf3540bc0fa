use crate::error::{Error, Result};

/// Sentence-level anisotropy: `|Σᵢ Σ_{j≠i} cos(zᵢ, zⱼ)| / (n² - n)`.
///
/// With unit vectors `uᵢ`, the ordered-pair sum equals `|Σ uᵢ|² - n`, so this
/// runs in `O(n·d)`.
pub fn anisotropy<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::EmptyInput("anisotropy needs at least two embeddings"));
    }
    let d = embeddings[0].as_ref().len();
    let mut sum = vec![0.0; d];
    let mut self_terms = 0.0;
    for (i, e) in embeddings.iter().enumerate() {
        let e = e.as_ref();
        if e.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: e.len(),
            });
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embeddings"));
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector { id: format!("#{i}") });
        }
        let mut sq = 0.0;
        for (s, x) in sum.iter_mut().zip(e) {
            let u = x / norm;
            *s += u;
            sq += u * u;
        }
        self_terms += sq;
    }
    let total: f64 = sum.iter().map(|s| s * s).sum::<f64>() - self_terms;
    let pairs = (n * n - n) as f64;
    Ok((total.abs() / pairs).min(1.0))
}
