//! Error taxonomy shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("encoder backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("embedding cache storage failure: {0}")]
    Storage(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label outside configured taxonomy: {0}")]
    Label(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("phoneme id outside inventory: {0}")]
    Vocab(String),

    #[error("alignment infeasible: {0}")]
    AlignmentInfeasible(String),

    #[error("model unavailable: {0}")]
    ModelUnavailable(String),

    #[error("text expansion failed: {0}")]
    Expansion(String),

    #[error("image generation failed after {attempts} attempt(s): {message}")]
    Generation { message: String, attempts: u32 },

    #[error("invalid generation request: {0}")]
    InvalidRequest(String),

    #[error("manifest integrity violation at entry {entry}: {message}")]
    Integrity { entry: String, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("degenerate evaluation input: {0}")]
    DegenerateEval(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
