use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingestion error at row {row}: {msg}")]
    Ingestion { row: usize, msg: String },

    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse {
        row: usize,
        column: usize,
        msg: String,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: String,
        index: usize,
        size: usize,
    },

    #[error("sequence length {len} exceeds limit {limit}")]
    SequenceLength { len: usize, limit: usize },

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("resource limit: {required_bytes} bytes required, budget is {budget_bytes} bytes")]
    Resource {
        required_bytes: u64,
        budget_bytes: u64,
    },

    #[error(
        "training diverged at epoch {epoch}, batch {batch}: loss {loss}, largest parameter `{param}` has norm {norm}"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        param: String,
        norm: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Shape { .. } => "dimension",
            Error::NonFinite(_) | Error::Diverged { .. } => "numeric",
            Error::Config(_) | Error::SequenceLength { .. } | Error::Contract(_) => "config",
            Error::Ingestion { .. } | Error::Parse { .. } | Error::Index { .. } => "data",
            Error::Corruption(_) | Error::Format(_) => "checkpoint",
            Error::Resource { .. } => "resource",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
