use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("softmax row {row} is masked in every entry")]
    MaskedRow { row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::TensorError::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
