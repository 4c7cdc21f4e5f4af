use thiserror::Error;

/// Errors raised by the streaming kit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty text cannot be segmented")]
    EmptyText,

    #[error("reserved marker {marker} found inside unit {index} body")]
    ReservedInBody { index: usize, marker: &'static str },

    #[error("invalid reserved-id table: {0}")]
    ReservedIds(String),

    #[error("boundary count mismatch: {eos} <EOS> in input vs {eot} <EOT> in reasoning")]
    BoundaryMismatch { eos: usize, eot: usize },

    #[error("invalid alignment: {0}")]
    Alignment(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid size: {0}")]
    Size(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} out of range for {n}x{n} mask")]
    RowOutOfRange { row: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("every logit is masked or non-finite")]
    AllMasked,

    #[error("cache state error: {0}")]
    CacheState(String),

    #[error("out-of-order prefill: expected unit {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("slice of {len} input tokens does not land on a unit boundary")]
    SliceBoundary { len: usize },

    #[error("deadlock: reasoning unit {unit} needs {needed} input units but the schedule has {available}")]
    Deadlock { unit: usize, needed: usize, available: usize },

    #[error("granularity undefined: reasoning has no <EOT>")]
    NoEot,

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("embedding provider failed at unit {unit}: {message}")]
    Provider { unit: usize, message: String },

    #[error("remote call failed: {0}")]
    Remote(String),

    #[error("depth {0} requires global thinking content")]
    MissingGlobalContent(&'static str),

    #[error("session file line {line}: {message}")]
    Session { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for failures caused by a remote service rather than bad input.
    pub fn is_remote(&self) -> bool {
        matches!(self, Error::Remote(_) | Error::Provider { .. })
    }
}
