use std::fmt;

/// CLI failure classes, mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage or configuration (exit code 2).
    Config(String),
    /// Simulation or I/O failure during execution (exit code 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numerical(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<quditsense::Error> for CliError {
    fn from(e: quditsense::Error) -> Self {
        match e {
            // Precondition violations trace back to the configuration.
            quditsense::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Numerical(format!("i/o failure: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
