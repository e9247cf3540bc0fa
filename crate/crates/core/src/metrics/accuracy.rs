use crate::error::{Error, Result};

/// Text form of the end-of-sequence marker. Decoded text is cut at its first
/// occurrence before comparison.
pub const EOS_MARKER: &str = "</s>";

/// Normalizes a decoded label: cut at the first EOS marker, then trim outer
/// whitespace (the prompt template ends in a newline that decoders may echo).
pub fn normalize_decoded(decoded: &str) -> &str {
    let cut = decoded.find(EOS_MARKER).map_or(decoded, |i| &decoded[..i]);
    cut.trim()
}

pub fn strict_match(decoded: &str, gold: &str) -> bool {
    normalize_decoded(decoded) == gold.trim()
}

/// Fraction of decoded labels that equal their gold label exactly.
pub fn strict_match_accuracy<D: AsRef<str>, G: AsRef<str>>(decoded: &[D], gold: &[G]) -> Result<f64> {
    if decoded.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: decoded.len(),
            right: gold.len(),
        });
    }
    if decoded.is_empty() {
        return Err(Error::EmptyInput("decoded labels"));
    }
    let hits = decoded
        .iter()
        .zip(gold)
        .filter(|(d, g)| strict_match(d.as_ref(), g.as_ref()))
        .count();
    Ok(hits as f64 / decoded.len() as f64)
}
