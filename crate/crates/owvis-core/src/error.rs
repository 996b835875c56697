//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("annotation parse error in `{key}`: {message}")]
    AnnotationParse { key: String, message: String },

    #[error("validation error for video {video_id}, instance {instance}: {message}")]
    AnnotationInvalid { video_id: u64, instance: usize, message: String },

    #[error("split configuration error: {0}")]
    SplitConfig(String),

    #[error("split construction error: {0}")]
    SplitConstruction(String),

    #[error("synthetic data configuration error: {0}")]
    SynthConfig(String),

    #[error("feature assembly error: {0}")]
    Assembly(String),

    #[error("classifier width {actual} does not match registry ({expected} classes incl. unknown); run incremental_extend first")]
    ClassifierWidthMismatch { expected: usize, actual: usize },

    #[error("class registry may not shrink: {0}")]
    RegistryShrink(String),

    #[error("matching configuration error: {0}")]
    Matching(String),

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFiniteLoss { component: String, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("fingerprint mismatch: checkpoint was written by config {checkpoint} but current config is {current}")]
    FingerprintMismatch { checkpoint: String, current: String },

    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Exit code class: 1 for validation/config problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AnnotationParse { .. }
            | Error::AnnotationInvalid { .. }
            | Error::SplitConfig(_)
            | Error::SynthConfig(_)
            | Error::Config(_)
            | Error::FingerprintMismatch { .. }
            | Error::ClassifierWidthMismatch { .. }
            | Error::RegistryShrink(_) => 1,
            _ => 2,
        }
    }
}
