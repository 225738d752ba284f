use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// HMC chain whose post-tuning acceptance rate fell below the usable floor.
    #[error("degenerate chain{}: acceptance rate {acceptance:.4} below {floor}", subject.map(|s| format!(" for subject {s}")).unwrap_or_default())]
    DegenerateChain {
        acceptance: f64,
        floor: f64,
        subject: Option<usize>,
    },

    #[error("displacement inversion did not converge: max residual {max_residual:.4} mm exceeds {tolerance:.4} mm")]
    InversionFailed { max_residual: f64, tolerance: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: truncated at byte offset {offset} (needed {needed} more bytes)", path.display())]
    Truncated {
        path: PathBuf,
        offset: u64,
        needed: u64,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Numerical failures (as opposed to bad data or bad arguments).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateChain { .. } | Error::InversionFailed { .. }
        )
    }
}
