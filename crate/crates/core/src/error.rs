use thiserror::Error;

#[derive(Debug, Error)]
pub enum HitError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("window partition: extents {h}x{w} not divisible by window size {m}")]
    Partition { h: usize, w: usize, m: usize },
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {loss}")]
    NonFinite { step: usize, loss: f64 },
    #[error("unpaired files: {}", .0.join(", "))]
    Unpaired(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HitError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(HitError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
