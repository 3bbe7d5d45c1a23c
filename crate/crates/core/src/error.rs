use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CcvcError {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("missing label file for image stem `{stem}`")]
    MissingLabel { stem: String },

    #[error("label file {path} contains id {id}, but only {class_count} classes are configured")]
    LabelOutOfRange {
        path: PathBuf,
        id: u8,
        class_count: usize,
    },

    #[error("non-finite value in {component}: {value}")]
    NonFinite { component: String, value: f64 },

    #[error("no evaluable pixels (empty-evaluation)")]
    EmptyEvaluation,

    #[error("checkpoint error at byte offset {offset}: {reason}")]
    Checkpoint { offset: u64, reason: String },

    #[error("unsupported-version: checkpoint format `{found}`, expected `{expected}`")]
    UnsupportedVersion { found: String, expected: String },

    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed metrics log at line {line}: {reason}")]
    MetricsLog { line: usize, reason: String },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CcvcError>;

pub(crate) fn param_err<T>(name: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(CcvcError::Parameter {
        name,
        reason: reason.into(),
    })
}

pub(crate) fn shape_err<T>(
    context: &'static str,
    expected: impl std::fmt::Debug,
    got: impl std::fmt::Debug,
) -> Result<T> {
    Err(CcvcError::Shape {
        context,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    })
}
