use thiserror::Error;

use magnet_autograd::AutogradError;

#[derive(Debug, Error)]
pub enum MagnetError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("non-finite {component} loss ({value})")]
    NonFinite { component: String, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(String),
}

impl MagnetError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MagnetError>;

pub(crate) fn config_err<R>(msg: impl Into<String>) -> Result<R> {
    Err(MagnetError::Config(msg.into()))
}

pub(crate) fn input_err<R>(msg: impl Into<String>) -> Result<R> {
    Err(MagnetError::Input(msg.into()))
}
