use thiserror::Error;

/// Errors produced by the model, the solver, the scenario layer and the fitter.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("step size {step} exceeds the smallest delay {min_delay}")]
    StepTooLarge { step: f64, min_delay: f64 },

    #[error("integration span is inverted or empty: [{t0}, {t1}]")]
    InvertedSpan { t0: f64, t1: f64 },

    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64 },

    #[error("query time {t} lies beyond the end of the trajectory ({t1})")]
    BeyondHorizon { t: f64, t1: f64 },

    #[error("unknown cohort {index} (scenario has {count})")]
    UnknownCohort { index: usize, count: usize },

    #[error("unknown experiment group '{0}'")]
    UnknownGroup(String),

    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("no divided cells at t = {t}")]
    NoDividedCells { t: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid data: {0}")]
    InvalidData(String),
}

pub type Result<T> = std::result::Result<T, Error>;
