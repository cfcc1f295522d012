use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid chaos profile: {0}")]
    InvalidChaos(String),

    #[error("invalid workload plan: {0}")]
    InvalidPlan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("no target source: the application stream is empty")]
    NoTargetSource,

    #[error("insufficient rows: need at least {needed}, have {have}")]
    InsufficientRows { needed: usize, have: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("scaler has not been fitted")]
    UnfittedScaler,

    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),

    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("no header")]
    NoHeader,

    #[error("k={k} exceeds training size {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("singular system; use ridge_lambda > 0")]
    Singular,

    #[error("non-finite training loss at epoch {epoch}; try a smaller learning rate (current {learning_rate})")]
    NonFiniteLoss { epoch: usize, learning_rate: f64 },

    #[error("lagged target unavailable for persistence forecast")]
    LaggedTargetUnavailable,

    #[error("mape undefined: {0} zero actual value(s); configure the zero-actual policy")]
    ZeroActual(usize),

    #[error("empty search space")]
    EmptySpace,

    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),

    #[error("unbalanced design: {0}")]
    UnbalancedDesign(String),

    #[error("mixed dataset ids: {0} vs {1}")]
    MixedDatasets(String, String),

    #[error("model format error in field `{field}`: expected {expected}, found {found}")]
    ModelFormat {
        field: String,
        expected: String,
        found: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("simulation failed in cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
