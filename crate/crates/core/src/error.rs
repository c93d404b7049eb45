//! Error taxonomy shared by the whole workspace. The CLI maps each variant
//! to a distinct exit code (config 2, input 3, numeric 4).

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent specs, shapes or config files.
    #[error("config error: {0}")]
    Config(String),
    /// Bad runtime data: out-of-range ids, malformed dataset lines, overlong sequences.
    #[error("input error: {0}")]
    Input(String),
    /// API misuse: non-scalar loss, missing gradients, ragged comparisons.
    #[error("usage error: {0}")]
    Usage(String),
    /// NaN or other numeric failure, with enough context to locate it.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
