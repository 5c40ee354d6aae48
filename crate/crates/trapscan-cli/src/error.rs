use std::process::ExitCode;

use trapscan::Error;

pub const EX_USAGE: u8 = 64;
pub const EX_DATAERR: u8 = 65;
pub const EX_SOFTWARE: u8 = 70;
pub const EXIT_INGESTION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_TRAP_NOT_FOUND: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Internal(String),
    /// The report was written but some inputs failed; carries the exit code.
    #[error("{message}")]
    Partial { code: u8, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Usage(_) => EX_USAGE,
            Self::Config(_) => EX_DATAERR,
            Self::Core(e) => core_code(e),
            Self::Internal(_) => EX_SOFTWARE,
            Self::Partial { code, .. } => *code,
        })
    }
}

pub fn core_code(e: &Error) -> u8 {
    match e {
        _ if e.is_ingestion() => EXIT_INGESTION,
        Error::Numerical(_)
        | Error::Fit(_)
        | Error::DegenerateSvd(_)
        | Error::Divergence { .. }
        | Error::NonFiniteLogits { .. } => EXIT_NUMERICAL,
        Error::TrapNotFound { .. } => EXIT_TRAP_NOT_FOUND,
        _ => EX_DATAERR,
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}
