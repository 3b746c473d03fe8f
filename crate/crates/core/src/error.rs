use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate token surface `{0}`")]
    DuplicateToken(String),
    #[error("invalid token: {0}")]
    InvalidToken(String),
    #[error("no free placeholder token left for tag `{0}`")]
    NoFreePlaceholder(String),
    #[error("an entity END tag is already bound (`{existing}`), cannot bind `{requested}`")]
    DuplicateEndTag { existing: String, requested: String },
    #[error("tag surface `{0}` is already bound")]
    DuplicateTag(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("blank token found at position {0} of a label sequence")]
    BlankInLabelSequence(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid emission matrix: {0}")]
    InvalidEmission(String),
    #[error("{paths} paths exceed the brute-force limit of {limit}")]
    TooLargeForOracle { paths: f64, limit: f64 },
    #[error("label sequence needs at least {required} frames but only {frames} are available")]
    InfeasibleAlignment { required: usize, frames: usize },
    #[error("label sequence has zero probability under the emissions")]
    ZeroProbability,
    #[error("transcript is not canonical: {0}")]
    NotCanonical(String),
    #[error("reference and hypothesis are not aligned: {reference} vs {hypothesis} items")]
    Alignment { reference: usize, hypothesis: usize },
    #[error("reference word sequence is empty")]
    EmptyReference,
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
