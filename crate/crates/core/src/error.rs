use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab too small: {0} (need at least 4 entries including specials)")]
    VocabTooSmall(usize),
    #[error("malformed vocab file at line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("invalid surprisal for token id {id}: {value}")]
    BadSurprisal { id: usize, value: f64 },
    #[error("time step {t} out of range 0..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("invalid step pair: s={s} must be < t={t}")]
    InvalidStepPair { s: usize, t: usize },
    #[error("sequence length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("position {pos}: x_t holds token {xt} but x_0 holds {x0}")]
    InconsistentPair { pos: usize, xt: u32, x0: u32 },
    #[error("position {pos}: masked at step {t} although retention is 1")]
    ImpossibleState { pos: usize, t: usize },
    #[error("impossible evidence at position {pos}: q(x_t | x_0) = 0")]
    ImpossibleEvidence { pos: usize },
    #[error("clean sequence contains the mask token at position {0}")]
    MaskInCleanSequence(usize),
    #[error("time step {0}")]
    TimeConditioning(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint vocab hash {found} does not match vocab {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
