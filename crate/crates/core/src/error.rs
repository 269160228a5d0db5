use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("input has length {got}, expected {expected}")]
    InputShape { expected: usize, got: usize },

    #[error("parameter shape mismatch: {0}")]
    ParamShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration needs {needed} {unit}, cap is {cap}")]
    EnumerationCap {
        needed: u128,
        cap: u128,
        unit: &'static str,
    },

    #[error("hypothesis violated: {0}")]
    Contract(String),

    #[error("window ({i1}, {i2}) out of range for depth {depth}")]
    WindowOutOfRange { i1: usize, i2: usize, depth: usize },

    #[error("cannot merge accumulator '{left}' with '{right}'")]
    StatisticMismatch { left: String, right: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Validation failures map to exit code 1, internal assertion failures to 2.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Contract(_))
    }
}
