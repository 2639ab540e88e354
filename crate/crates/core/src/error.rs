use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trace spec: {0}")]
    InvalidSpec(String),
    #[error("generator failure: circulant embedding eigenvalue {value:e} at index {index} is negative")]
    GeneratorFailure { index: usize, value: f64 },
    #[error("attack window [{start}, {end}) out of bounds for trace of length {len}")]
    WindowOutOfBounds { start: usize, end: usize, len: usize },
    #[error("attack windows overlap or are unordered: [{0}, {1}) and [{2}, {3})")]
    OverlappingWindows(usize, usize, usize, usize),
    #[error("trace too short: {len} slots, need at least {min}")]
    TraceTooShort { len: usize, min: usize },
    #[error("degenerate trace: zero variance, Hurst parameter undefined")]
    DegenerateTrace,
    #[error("invalid moment order q = {0}")]
    InvalidQ(f64),
    #[error("need at least two moment orders, got {0}")]
    TooFewOrders(usize),
    #[error("zero-mean trace: coefficient of variation undefined")]
    ZeroMean,
    #[error("window of {window} slots too large for trace of {len} slots")]
    WindowTooLarge { window: usize, len: usize },
    #[error("query falls in a saturated region of the calibration table")]
    SaturatedRegion,
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("input outside the formula domain: {0}")]
    InvalidDomain(String),
    #[error("unknown endpoint: {0}")]
    UnknownEndpoint(String),
    #[error("no admissible path between {0} and {1}")]
    EmptyAdmissibleSet(String, String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration table required for this method mode")]
    CalibrationMissing,
    #[error("invariant audit failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
