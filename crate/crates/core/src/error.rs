use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("quality oracle unavailable: {0}")]
    OracleUnavailable(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("alternation schedule violated: {0}")]
    ScheduleViolation(String),
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
