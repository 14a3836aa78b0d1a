//! Exit-code contract and the mapping from library errors.

use std::io;

use wavetrain::Error;

pub const OK: i32 = 0;
/// Uncategorised runtime failure (eigensolver, quadrature, consistency).
pub const FAILURE: i32 = 1;
pub const NONCONVERGENCE: i32 = 2;
pub const UNSTABLE: i32 = 3;
pub const DECAY_CHECK: i32 = 4;
pub const CONFIG: i32 = 64;
pub const MISSING_INPUT: i32 = 66;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

pub fn code_for(e: &Error) -> i32 {
    match e {
        Error::NonConvergence { .. } | Error::DegenerateFamily(_) => NONCONVERGENCE,
        Error::Divergence { .. } | Error::AmbiguousPhase { .. } | Error::AnsatzBreakdown { .. } => DECAY_CHECK,
        Error::RejectedConfig(_)
        | Error::InvalidInput(_)
        | Error::UnknownSystem(_)
        | Error::NoWaveTrain { .. }
        | Error::DimensionMismatch { .. } => CONFIG,
        Error::Io(io) if io.kind() == io::ErrorKind::NotFound => MISSING_INPUT,
        _ => FAILURE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new(code_for(&e), e.to_string())
    }
}
