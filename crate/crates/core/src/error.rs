use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or option combinations that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs outside an operation's mathematical domain (empty masks,
    /// fully masked softmax rows, non-finite values).
    #[error("domain error: {0}")]
    Domain(String),

    /// Broken internal contract between two modules.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn domain_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
