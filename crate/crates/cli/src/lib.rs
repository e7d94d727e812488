//! Config-driven experiments on synthetic screens: training, sampling,
//! evaluation, ablations, adaptors for unseen perturbations, the
//! embedding-error bound check and a transformer stability harness.

// Range checks are written `!(x > lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod config;
pub mod experiments;

pub use config::RunConfig;

use phenoflow_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// Process exit code: 2 config, 3 divergence, 4 data and everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(Error::Domain { .. }) => 2,
            Self::Core(Error::Divergence { .. }) => 3,
            _ => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(Error::Io(e))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
