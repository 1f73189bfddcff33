use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("weight file (format v{version}): {msg}")]
    Format { version: u32, msg: String },
    #[error("io error")]
    Io(#[from] std::io::Error),
}
