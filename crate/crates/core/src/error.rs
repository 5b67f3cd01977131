use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("grid extension: {0}")]
    Extension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    Data(String),
    #[error("edge lock: {0}")]
    Lock(String),
    #[error("training diverged at epoch {epoch}: validation loss is not finite")]
    Diverged { epoch: usize },
    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what: what.into(),
            expected,
            actual,
        })
    }
}
