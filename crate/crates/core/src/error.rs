//! Crate-wide error type. Contract violations (inadmissible parameters,
//! out-of-range arguments) are reported as typed errors rather than panics
//! so the harness can map them to exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inadmissible kernel parameters: {0}")]
    Inadmissible(String),

    #[error("degenerate collision pair: v == v_*")]
    DegeneratePair,

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("quadrature did not converge: {0}")]
    NonConvergence(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
