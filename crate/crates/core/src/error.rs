use std::fmt;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown token id {id} (vocabulary size {vocab_size})")]
    UnknownToken { id: usize, vocab_size: usize },

    #[error("operation requires a {expected} model, got {found}")]
    Role { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("offline description cache is missing classes: {}", .0.join(", "))]
    MissingDescriptions(Vec<String>),

    #[error("description provider failed (retriable): {0}")]
    Provider(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// A non-fatal condition recorded alongside a successful result.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Warning {
    TextTruncated { original: usize, max: usize },
    EmptyClassSkipped { class: String },
    EmptyVocabulary,
    NonPositiveAccuracy { base: f64, novel: f64 },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::TextTruncated { original, max } => {
                write!(f, "token sequence of length {original} truncated to {max}")
            }
            Warning::EmptyClassSkipped { class } => {
                write!(f, "class '{class}' has no samples and was skipped")
            }
            Warning::EmptyVocabulary => write!(f, "filtered vocabulary is empty"),
            Warning::NonPositiveAccuracy { base, novel } => {
                write!(f, "harmonic mean of {base} and {novel} defined as 0")
            }
        }
    }
}

/// A value together with the warnings raised while producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Warned<T> {
    pub value: T,
    pub warnings: Vec<Warning>,
}

impl<T> Warned<T> {
    pub fn clean(value: T) -> Self {
        Self {
            value,
            warnings: Vec::new(),
        }
    }

    pub(crate) fn with(value: T, warnings: Vec<Warning>) -> Self {
        for w in &warnings {
            log::warn!("{w}");
        }
        Self { value, warnings }
    }
}
