//! Byte-level vocabulary and the classification prompt template.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub const PROMPT_PREFIX: &str = "### Input:\n";
pub const PROMPT_SUFFIX: &str = " ### Output:\n";

/// `BOS + "### Input:\n" + sentence + " ### Output:\n"`, one token per byte.
pub fn build_prompt(sentence: &str, context: usize) -> Result<Vec<u32>> {
    if sentence.is_empty() {
        return Err(Error::EmptyInput("sentence"));
    }
    let mut tokens = Vec::with_capacity(1 + PROMPT_PREFIX.len() + sentence.len() + PROMPT_SUFFIX.len());
    tokens.push(BOS);
    tokens.extend(PROMPT_PREFIX.bytes().map(u32::from));
    tokens.extend(sentence.bytes().map(u32::from));
    tokens.extend(PROMPT_SUFFIX.bytes().map(u32::from));
    if tokens.len() > context {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            context,
        });
    }
    Ok(tokens)
}

/// Label bytes followed by EOS.
pub fn label_tokens(label: &str) -> Vec<u32> {
    label.bytes().map(u32::from).chain(std::iter::once(EOS)).collect()
}

/// Decodes generated ids to text; BOS/EOS are dropped.
pub fn decode_bytes(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_byte_exact() {
        let t = build_prompt("good", 128).unwrap();
        // BOS + 11 prefix bytes + 4 sentence bytes + 13 suffix bytes
        assert_eq!(PROMPT_PREFIX.len(), 11);
        assert_eq!(PROMPT_SUFFIX.len(), 13);
        assert_eq!(t.len(), 29);
        assert_eq!(t[0], BOS);
        assert_eq!(decode_bytes(&t), "### Input:\ngood ### Output:\n");
    }

    #[test]
    fn empty_and_overflow() {
        assert!(build_prompt("", 128).is_err());
        assert!(matches!(
            build_prompt(&"x".repeat(120), 128),
            Err(Error::ContextOverflow { len: 145, context: 128 })
        ));
    }

    #[test]
    fn injective_on_plain_sentences() {
        let a = build_prompt("the cat", 128).unwrap();
        let b = build_prompt("the cats", 128).unwrap();
        let c = build_prompt("the cat", 128).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn labels_end_with_eos() {
        assert_eq!(label_tokens("ab"), vec![97, 98, EOS]);
    }
}
