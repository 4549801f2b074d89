use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Model or run configuration is inconsistent (shapes, sizes, unknown kinds).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller-supplied value violates an operation precondition.
    #[error("input error: {0}")]
    Input(String),
    /// A loss or activation became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use input_err;
