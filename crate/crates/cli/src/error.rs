use std::fmt;

/// Top-level command errors, mapped onto the documented exit codes:
/// 1 validation failure, 2 config error, 3 I/O error.
#[derive(Debug)]
pub enum CliError {
    Validation,
    Config(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation => write!(f, "validation failed"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<misspec::Error> for CliError {
    fn from(e: misspec::Error) -> Self {
        match e {
            misspec::Error::Ingest(m) => CliError::Io(m),
            other => CliError::Config(other.to_string()),
        }
    }
}
