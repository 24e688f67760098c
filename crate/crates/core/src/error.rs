use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("normalization failed: {0}")]
    Normalization(String),
    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("training failed at step {step}: {message}")]
    Training { step: u64, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}
