//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Fatal ingest problems: unreadable stream, missing header columns.
    #[error("ingest: {0}")]
    Ingest(String),

    /// Inconsistent or unusable data (unknown station, empty split, short series).
    #[error("data: {0}")]
    Data(String),

    /// Tensor shape violations; the message names both shapes and the operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid parameter values (non-positive learning rate, bad kernel bandwidth).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Config file problems: unknown keys, unparsable values.
    #[error("config: {0}")]
    Config(String),

    /// Malformed on-disk artifact.
    #[error("artifact: {0}")]
    Artifact(String),

    /// Artifact carries an unsupported format version.
    #[error("artifact version mismatch: expected `{expected}`, found `{found}`")]
    ArtifactVersion { expected: String, found: String },

    /// Checkpoint was trained against a different station ordering.
    #[error("registry fingerprint mismatch: checkpoint has {checkpoint}, registry has {registry}")]
    FingerprintMismatch { checkpoint: String, registry: String },

    /// Non-finite loss or other numerical breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Param(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
