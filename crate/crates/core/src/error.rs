use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("decode error at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },
    #[error("png error: {0}")]
    Png(String),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("point ({x:.3}, {y:.3}) maps to infinity")]
    MappedToInfinity { x: f64, y: f64 },
    #[error("no valid warp after {0} attempts")]
    DegenerateWarp(usize),
    #[error("not enough distinct descriptors: need {needed}, have {have}")]
    NotEnoughData { needed: usize, have: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io error")]
    Io(#[from] std::io::Error),
    #[error("json error")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] kpdet_nn::NnError),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::File {
            path: path.into(),
            source,
        }
    }
}
