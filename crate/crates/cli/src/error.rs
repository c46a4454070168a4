use std::process::ExitCode;

use int4kv::Error;

/// Top-level failure, mapped to a distinct exit code per source module.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
    Selftest(usize),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Selftest(n) => write!(f, "{n} self-test check(s) failed"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Selftest(_) => 12,
            CliError::Core(e) => match e {
                Error::InvalidLayout(_) | Error::Shape(_) | Error::NonFiniteInput | Error::Index { .. } => 3,
                Error::NibbleRange(_) | Error::ZeroPointOverflow(_) => 4,
                Error::InvalidOrder(_) | Error::EmptyCalibration => 5,
                Error::TooFewSamples { .. } => 6,
                Error::CapacityExceeded | Error::SequenceNotFound(_) | Error::Format(_) => 7,
                Error::EmptySequence => 8,
                Error::Config { .. } => 9,
                Error::RequestTooLarge { .. } | Error::Workload(_) => 10,
                Error::Io(_) | Error::Json(_) | Error::Csv(_) => 11,
            },
        }
    }
}
