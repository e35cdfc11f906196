use thiserror::Error;

/// Errors produced by the admission library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("negative duration {0} h")]
    NegativeDuration(f64),

    #[error("scale-out size must be at least one core, got {0}")]
    EmptyScaleOut(u64),

    #[error("step {n} precedes activation step {i}")]
    StepOrder { n: usize, i: usize },

    #[error("a deployment with zero cores is dead on arrival")]
    DeadOnArrival,

    #[error("moment profiles use different look-ahead grids")]
    GridMismatch,

    #[error("moment diverges: {0}")]
    DivergentMoment(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("infeasible calibration bracket: {0}")]
    InfeasibleBracket(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
