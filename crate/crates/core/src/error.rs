use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Dataset(String),
    #[error("{0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(msg: impl Into<String>) -> Error {
        Error::Format(msg.into())
    }

    pub fn dataset(msg: impl Into<String>) -> Error {
        Error::Dataset(msg.into())
    }

    pub fn train(msg: impl Into<String>) -> Error {
        Error::Train(msg.into())
    }
}
