use alloc::boxed::Box;
use alloc::string::String;

use crate::aggregator::GateParams;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("usage error: {0}")]
    Usage(&'static str),

    #[error("finite-difference oracle hit a non-finite value at coordinate {0}")]
    OracleFailure(usize),

    /// Training produced a non-finite loss. `last_good` holds the parameters
    /// from before the offending step.
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: u32,
        step: u64,
        last_good: Box<GateParams>,
    },
}
