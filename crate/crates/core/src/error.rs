// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("partition failed: {0}")]
    Partition(String),

    /// Exact expectations were requested from a stochastic augmentation kernel.
    #[error("kernel mode: {0}")]
    KernelMode(String),

    /// The complement matrix R_{-j} does not exist when a client holds all the data (q_j = 1).
    #[error("client weight is 1; no other clients to contrast against")]
    SingleClient,

    /// Noise scale zero: the Gaussian mechanism gives no finite guarantee.
    #[error("privacy loss is unbounded (sigma = 0)")]
    UnboundedPrivacyLoss,

    #[error("privacy ledger: {0}")]
    Ledger(String),

    #[error("training diverged at round {round}: non-finite parameters")]
    Diverged { round: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("malformed input at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
