use std::fmt;

/// Failure classes with stable process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid, missing or inconsistent configuration or input files (exit 2).
    Config(String),
    /// Non-finite objective or singular numerics (exit 3).
    Numerical(String),
    /// Anything else, including I/O (exit 1).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    /// Classifies a library error raised while handling `context`.
    pub fn from_core(e: stgrape_core::Error, context: &str) -> Self {
        use stgrape_core::Error as E;
        match e {
            E::NonFinite(_) | E::Singular => CliError::Numerical(format!("{context}: {e}")),
            _ => CliError::Config(format!("{context}: {e}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
