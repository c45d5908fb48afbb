use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("offspring law has zero mean")]
    ZeroMean,

    #[error("offspring count overflow after {partial} of {parents} parents (running total {total})")]
    Overflow { parents: u64, partial: u64, total: u64 },

    #[error("simulation budget of {budget} exceeded ({detail})")]
    BudgetExceeded { budget: u64, detail: String },

    #[error("truncation bound {bound:e} exceeds 10% of l(n) = {value:e}")]
    InsufficientHorizon { value: f64, bound: f64 },

    #[error("environment contains a law outside the linear-fractional family at step {0}")]
    WrongFamily(usize),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("censoring rate {rate:.4} is at or above the 1% limit")]
    ExcessCensoring { rate: f64 },

    #[error("series truncation diagnostic {diagnostic:.4} exceeds 10%")]
    InsufficientK { diagnostic: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
