use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("timestep {t} out of range for schedule with {steps} steps")]
    Timestep { t: i64, steps: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
