use hemoseg_autodiff::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at step {step} (lr {lr:e}): {components}")]
    NonFinite { step: u64, lr: f64, components: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("level {level}: {axis} extent {extent} is not divisible by factor {factor}")]
    Indivisible {
        axis: &'static str,
        level: usize,
        extent: usize,
        factor: usize,
    },

    #[error("{what}: expected {expected} entries, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),

    #[error("expected dtype {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    #[error("invalid field: {0}")]
    Invalid(String),
}

pub(crate) fn data_err(detail: impl Into<String>) -> Error {
    Error::Data(detail.into())
}

pub(crate) fn config_err(detail: impl Into<String>) -> Error {
    Error::Config(ConfigError::Invalid(detail.into()))
}
