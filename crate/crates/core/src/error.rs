use thiserror::Error;

/// Errors produced across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rank {r} for a {d}x{k} layer (need 1 <= r < min(d, k))")]
    InvalidRank { d: usize, k: usize, r: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("aggregation row {row} has no positive affinity")]
    AllZeroRow { row: usize },

    #[error("infeasible partition: {n} samples cannot give {clients} clients {min} samples each")]
    InfeasiblePartition { n: usize, clients: usize, min: usize },

    #[error("csv parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("non-numeric feature at line {line}, column {column}: {value:?}")]
    NonNumericFeature {
        line: u64,
        column: usize,
        value: String,
    },

    #[error("missing label column {0:?}")]
    MissingLabelColumn(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("client {client} failed: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: &'static str, expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        context,
        expected: format!("{}x{}", expected.0, expected.1),
        got: format!("{}x{}", got.0, got.1),
    }
}
