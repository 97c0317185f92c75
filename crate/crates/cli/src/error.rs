use std::fmt;
use std::io;
use std::path::Path;

use pmelm::data::DataError;
use pmelm::influence::InfluenceError;
use pmelm::model::ModelError;
use pmelm::report::ReportError;
use pmelm::simulate::SimulateError;
use pmelm::study::StudyError;

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys, or input files (exit 2).
    Usage(String),
    /// Reading or writing failed (exit 3).
    Io(String),
    /// The model fit did not converge (exit 4).
    Fit(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Fit(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn write(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("cannot write {}: {err}", path.display()))
    }

    /// A missing or unreadable input is a usage error; other read failures
    /// are I/O errors.
    pub fn read(path: &Path, err: &io::Error) -> Self {
        let msg = format!("cannot read {}: {err}", path.display());
        match err.kind() {
            io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied | io::ErrorKind::IsADirectory => {
                CliError::Usage(msg)
            }
            _ => CliError::Io(msg),
        }
    }

    pub fn panel(path: &Path, err: DataError) -> Self {
        match err {
            DataError::Io(e) => CliError::read(path, &e),
            other => CliError::Usage(format!("{}: {other}", path.display())),
        }
    }

    pub fn model(err: ModelError) -> Self {
        match err {
            ModelError::NonConvergence { .. } | ModelError::NonConcaveAtOptimum { .. } => {
                CliError::Fit(format!("fit failed: {err}"))
            }
            other => CliError::Usage(other.to_string()),
        }
    }

    pub fn influence(err: InfluenceError) -> Self {
        match err {
            InfluenceError::Model(e) => CliError::model(e),
            InfluenceError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Fit(other.to_string()),
        }
    }

    pub fn simulate(err: SimulateError) -> Self {
        CliError::Usage(err.to_string())
    }

    pub fn report(err: ReportError) -> Self {
        CliError::Usage(err.to_string())
    }

    pub fn study(err: StudyError) -> Self {
        match err {
            StudyError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Io(format!("study aborted: {other}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Fit(m) => f.write_str(m),
        }
    }
}
