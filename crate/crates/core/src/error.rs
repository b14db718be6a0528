use thiserror::Error;

pub type Result<T> = std::result::Result<T, TpaError>;

#[derive(Debug, Error)]
pub enum TpaError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Every logit in a softmax row was masked out.
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "cache position mismatch: key rotated for position {rotated_at}, cache expects {expected}"
    )]
    Position { rotated_at: usize, expected: usize },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TpaError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        TpaError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
