use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // EDF1 decoding
    #[error("bad magic: expected \"EDF1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported EDF1 version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated dump: {context}")]
    Truncated { context: String },
    #[error("inconsistent dump: {0}")]
    Inconsistent(String),
    #[error("invalid dump: {0}")]
    InvalidDump(String),

    // detectors
    #[error("{}", collision_message(.groups))]
    Collision { groups: Vec<CollisionGroup> },
    #[error("invalid class names: {0}")]
    InvalidClassNames(String),
    #[error(
        "degenerate fit: every class has fewer than 2 samples, so a Gaussian cannot be fitted \
         (Mahalanobis is undefined for 1-shot data)"
    )]
    DegenerateFit,
    #[error("covariance factorization failed: matrix is not positive definite (pivot {pivot} = {value:e})")]
    Factorization { pivot: usize, value: f64 },
    #[error("zero vector for record {id:?}")]
    ZeroVector { id: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("missing class logits: {0}")]
    MissingLogits(String),
    #[error("record {id:?} in the fit split has no label")]
    MissingLabel { id: String },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // toy model
    #[error("sequence of {len} tokens exceeds the context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("class {class:?} has no training examples")]
    EmptyClass { class: String },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Names that share one first token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollisionGroup {
    pub token: u32,
    pub names: Vec<String>,
}

fn collision_message(groups: &[CollisionGroup]) -> String {
    let listed: Vec<String> = groups
        .iter()
        .map(|g| format!("{{{}}} (token {})", g.names.join(", "), g.token))
        .collect();
    format!(
        "class names share a first token: {}; supply a rename for all but one name in each group \
         (e.g. position=location)",
        listed.join("; ")
    )
}

impl Error {
    /// An I/O error tagged with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
