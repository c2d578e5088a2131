// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = OtterError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OtterError {
    /// Inconsistent shapes, widths or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad caller-supplied data (tokens out of vocabulary, empty prompts, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric domain error: {0}")]
    Numeric(String),

    /// Operations issued in an order the extension stack does not allow.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// The finite-difference oracle saw two different values for the same input.
    #[error("unreliable oracle: loss evaluated twice at the same point gave {first} and {second}")]
    UnreliableOracle { first: f64, second: f64 },

    /// Non-disruption or structural-zero check failed.
    #[error("verification failed at {location}: {detail}")]
    Verification { location: String, detail: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: tensor `{tensor}`: {detail}")]
    Corrupt { tensor: String, detail: String },

    #[error("timing error: {0}")]
    Measurement(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl OtterError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OtterError::Io { path: path.into(), source }
    }
}
