use std::fmt;
use std::process::ExitCode;

use serde::Serialize;

/// Exit status contract: 0 success, 1 runtime failure, 2 usage or config failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Runtime,
    Usage,
}

impl Class {
    pub fn code(self) -> u8 {
        match self {
            Class::Runtime => 1,
            Class::Usage => 2,
        }
    }
}

/// A failure reported as one JSON object on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub class: Class,
    pub kind: &'static str,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(kind: &'static str, message: impl fmt::Display) -> Self {
        Self {
            class: Class::Usage,
            kind,
            message: message.to_string(),
        }
    }

    pub fn runtime(kind: &'static str, message: impl fmt::Display) -> Self {
        Self {
            class: Class::Runtime,
            kind,
            message: message.to_string(),
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self::runtime("io", format!("{}: {e}", path.display()))
    }

    pub fn report(&self) -> ExitCode {
        let record = serde_json::json!({
            "error": self.kind,
            "class": self.class,
            "message": self.message,
            "exit_code": self.class.code(),
        });
        eprintln!("{record}");
        ExitCode::from(self.class.code())
    }
}
