use std::fmt;

/// Exit code 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<pgr_core::Error> for CliError {
    fn from(e: pgr_core::Error) -> Self {
        use pgr_core::Error as E;
        match &e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Validation(e.to_string()),
            E::Io(_) | E::Diverged { .. } | E::NonFinite { .. } | E::Judge(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        pgr_core::Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}
