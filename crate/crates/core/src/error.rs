use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, at least {needed} required")]
    SignalTooShort { len: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("silent input: {0}")]
    Silent(String),

    #[error("unsupported audio format in {path}: {reason}")]
    AudioFormat { path: PathBuf, reason: String },

    #[error("missing files: {}", display_paths(.0))]
    MissingFiles(Vec<PathBuf>),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("quality oracle failed: {message} (captured output: {output:?})")]
    Oracle { message: String, output: String },

    #[error("non-finite {what} at minibatch {minibatch}")]
    NonFinite { what: String, minibatch: usize },

    #[error("empty {0}")]
    Empty(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("refusing to overwrite {path}: existing run used a different configuration")]
    ConfigConflict { path: PathBuf },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SignalTooShort { .. } => "signal_too_short",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Silent(_) => "silent",
            Error::AudioFormat { .. } => "audio_format",
            Error::MissingFiles(_) => "missing_files",
            Error::Manifest { .. } => "manifest",
            Error::Oracle { .. } => "oracle",
            Error::NonFinite { .. } => "non_finite",
            Error::Empty(_) => "empty",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::MissingPrerequisite(_) => "missing_prerequisite",
            Error::ConfigConflict { .. } => "config_conflict",
            Error::Wav(_) => "wav",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
