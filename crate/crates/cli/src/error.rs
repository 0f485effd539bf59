use std::fmt;

use splitq_core::SplitqError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(SplitqError),
    Io(std::io::Error),
}

impl CliError {
    /// 1 usage or configuration, 2 data or format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Core(e) if e.is_numerical_failure() => 3,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<SplitqError> for CliError {
    fn from(e: SplitqError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(e) => CliError::Io(e),
            other => CliError::Io(std::io::Error::other(format!("{other:?}"))),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(SplitqError::Json(e))
    }
}
