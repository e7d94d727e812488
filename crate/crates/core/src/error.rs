use thiserror::Error;

use crate::sample::SolverStats;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("tape state error: {0}")]
    State(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{what} = {value} outside of its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("singular evaluation: {0}")]
    Singularity(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("step size underflow at t = {t} (h = {h:e}) after {} evaluations", stats.nfe)]
    Stiffness { t: f64, h: f64, stats: SolverStats },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
