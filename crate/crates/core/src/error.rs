use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CramError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CramError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A code was read by a compressor of a different version.
    #[error("stale code: code version {code_version}, compressor version {compressor_version}")]
    StaleCode {
        code_version: u32,
        compressor_version: u32,
    },

    #[error("buffer holds mixed code versions {0:?}")]
    MixedVersions(Vec<u32>),

    #[error("refresh must advance exactly one version: buffer at {buffer}, compressor at {compressor}")]
    VersionGap { buffer: u32, compressor: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("task {task}, phase {phase}: {source}")]
    Phase {
        task: usize,
        phase: &'static str,
        #[source]
        source: Box<CramError>,
    },

    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CramError {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CramError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        CramError::Format {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CramError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach task index and phase name to an error raised inside a run.
    pub fn in_phase(self, task: usize, phase: &'static str) -> Self {
        match self {
            already @ CramError::Phase { .. } => already,
            other => CramError::Phase {
                task,
                phase,
                source: Box::new(other),
            },
        }
    }

    /// True for errors that originate in user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, CramError::Config { .. })
    }
}
