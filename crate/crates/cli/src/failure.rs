use std::fmt;

/// Command failure, split by exit code: 1 for usage and configuration
/// problems, 2 for everything that goes wrong while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    fn map_message(self, f: impl FnOnce(String) -> String) -> Self {
        match self {
            Failure::Usage(m) => Failure::Usage(f(m)),
            Failure::Runtime(m) => Failure::Runtime(f(m)),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<airtime::Error> for Failure {
    fn from(e: airtime::Error) -> Self {
        match e {
            airtime::Error::Config(_) | airtime::Error::Usage(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub trait Context<T> {
    /// Prefixes the error message, keeping its exit code.
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| e.into().map_message(|m| format!("{what}: {m}")))
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}
