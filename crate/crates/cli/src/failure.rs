use std::fmt;
use std::path::Path;

use hetgt::Error;

/// A fatal error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: ExitCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Io = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    CheckFailed = 5,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: ExitCode::Config,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            code: ExitCode::Io,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.code {
            ExitCode::Io => "i/o error",
            ExitCode::Config => "config error",
            ExitCode::Data => "data error",
            ExitCode::Numerical => "numerical error",
            ExitCode::CheckFailed => "check failed",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => ExitCode::Io,
            Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } => ExitCode::Config,
            Error::Data { .. } | Error::Structural(_) => ExitCode::Data,
            Error::NonFinite { .. } => ExitCode::Numerical,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
