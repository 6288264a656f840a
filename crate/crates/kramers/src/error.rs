//! Error type shared by all library modules.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-domain arguments (non-square matrices, NaN inputs,
    /// dimension mismatches, unsupported ranks).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A spectral precondition failed (e.g. a symmetric part that must be
    /// positive or negative definite is not).
    #[error("spectral precondition failed: {0}")]
    SpectralPrecondition(String),

    /// A matrix that must be inverted is singular to working precision.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Configuration file could not be parsed or is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Arguments are individually valid but mutually incompatible
    /// (e.g. a cell solution evaluated with mismatched build parameters).
    #[error("incompatible arguments: {0}")]
    Incompatible(String),

    /// A simulated path left the finite range. Carries the last finite time
    /// and, when known, the path index within its ensemble.
    #[error("path diverged at t = {t} (path index {path:?})")]
    Divergence { t: f64, path: Option<usize> },

    /// A numerical contract was violated (residual too large, factorization
    /// failed on a matrix that passed its preconditions).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
