use std::path::{Path, PathBuf};

use morphforge_core::blend::BlendError;
use morphforge_core::dataset::DatasetError;
use morphforge_core::imaging::ImageError;
use morphforge_core::partial::PartialError;
use morphforge_core::render::RenderError;
use morphforge_learn::attack::AttackError;
use morphforge_learn::lrp::LrpError;
use morphforge_learn::nn::NnError;
use serde::Serialize;
use thiserror::Error;

/// Failure class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numeric,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    /// One-line machine-readable record for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: ErrorKind,
            code: i32,
            message: &'a str,
        }
        serde_json::to_string(&Record {
            error: self.kind,
            code: self.kind.exit_code(),
            message: &self.message,
        })
        .expect("error record serializes")
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::BadRatios(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<PartialError> for CliError {
    fn from(e: PartialError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<BlendError> for CliError {
    fn from(e: BlendError) -> Self {
        match e {
            BlendError::SolverDiverged { .. } => Self::numeric(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Blend(b) => b.into(),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io { .. } | NnError::Format(_) => Self::data(e.to_string()),
            NnError::TooFewFCLayers(_) | NnError::LossHeadMismatch { .. } => Self::config(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Nn(n) => n.into(),
            AttackError::BadEpsilons(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<LrpError> for CliError {
    fn from(e: LrpError) -> Self {
        match e {
            LrpError::Nn(n) => n.into(),
            _ => Self::numeric(e.to_string()),
        }
    }
}

/// Adds the path to an I/O error.
pub trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| CliError::io(&path.into(), e))
    }
}
