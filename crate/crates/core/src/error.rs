use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants follow the failure classes of the numeric contracts: shape
/// problems are [`Error::Dimension`], bad scalar arguments are
/// [`Error::Parameter`], architecture/config inconsistencies are
/// [`Error::Config`], and so on.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("state error: {0}")]
    State(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("degenerate signal: {0}")]
    Degenerate(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("insufficient signal: {0}")]
    InsufficientSignal(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use {config_err, dim_err, param_err};
