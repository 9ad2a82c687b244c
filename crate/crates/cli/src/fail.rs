//! Error classes and the exit codes they map to.

use std::fmt;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for unexpected failures (for example an unwritable output).
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for bad arguments, configs or input files.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit code for a numerical failure during optimization or fitting.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Numerical,
    Other,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Other,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Validation => EXIT_VALIDATION,
            Kind::Numerical => EXIT_NUMERICAL,
            Kind::Other => EXIT_FAILURE,
        }
    }

    /// Prefixes the message with `context`.
    pub fn context(mut self, context: impl fmt::Display) -> Self {
        self.message = format!("{context}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<warpsynth::Error> for CliError {
    fn from(e: warpsynth::Error) -> Self {
        // Input paths are checked up front, so an I/O error here means an
        // output could not be written.
        let kind = if e.is_numerical() {
            Kind::Numerical
        } else if matches!(e.root(), warpsynth::Error::Io { .. }) {
            Kind::Other
        } else {
            Kind::Validation
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::validation(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_contract_codes() {
        let num: CliError = warpsynth::Error::NumericalFailure {
            level: 1,
            iteration: 4,
        }
        .into();
        assert_eq!(num.exit_code(), EXIT_NUMERICAL);
        let batch: CliError = warpsynth::Error::Batch {
            index: 2,
            source: Box::new(warpsynth::Error::NumericalFailure {
                level: 0,
                iteration: 1,
            }),
        }
        .into();
        assert_eq!(batch.exit_code(), EXIT_NUMERICAL);
        let bad: CliError = warpsynth::Error::Format("bad magic".into()).into();
        assert_eq!(bad.exit_code(), EXIT_VALIDATION);
        assert_eq!(CliError::other("disk full").exit_code(), EXIT_FAILURE);
    }
}
