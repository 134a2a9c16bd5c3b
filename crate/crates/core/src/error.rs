use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("OCV fit is not monotone increasing near soc {soc:.4} (slope {slope:.4e} V)")]
    NonMonotoneOcv { soc: f64, slope: f64 },

    #[error("theta is singular for inversion: a1 = {a1}")]
    SingularTheta { a1: f64 },

    #[error("non-physical parameters from theta: r0={r0:.6e} rd={rd:.6e} cd={cd:.6e}")]
    NonPhysical { r0: f64, rd: f64, cd: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: row {row}: {message}")]
    BadRow { path: PathBuf, row: usize, message: String },

    #[error("{path}: file has no data rows")]
    EmptyFile { path: PathBuf },

    #[error("time gap at t = {time_s} s (bin {bin} has no samples)")]
    TimeGap { time_s: f64, bin: usize },

    #[error("model file format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (diverged training, singular
    /// identification) as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::SingularTheta { .. } | Error::NonPhysical { .. }
        )
    }
}
