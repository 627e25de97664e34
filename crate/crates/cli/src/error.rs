use std::fmt;
use std::path::PathBuf;

use pertforge::backend::BackendError;
use pertforge::perturb::PerturbError;
use pertforge::pgo::PgoError;
use pertforge::tasks::TaskError;

/// Process exit codes. Every failure maps to exactly one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Validation = 1,
    RunFailure = 2,
    Resumable = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
    /// Run directory to pass to `--resume` after a resumable abort.
    pub checkpoint: Option<PathBuf>,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            exit: Exit::Validation,
            message: message.into(),
            checkpoint: None,
        }
    }

    pub fn run(message: impl Into<String>) -> Self {
        CliError {
            exit: Exit::RunFailure,
            message: message.into(),
            checkpoint: None,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::run(format!("{}: {e}", path.display()))
    }

    pub fn from_pgo(e: PgoError, run_dir: Option<PathBuf>) -> Self {
        let exit = match &e {
            _ if e.is_resumable() => Exit::Resumable,
            PgoError::Invalid(_)
            | PgoError::MissingCode(_)
            | PgoError::Locked(_)
            | PgoError::ResumeMismatch(_)
            | PgoError::Perturb(PerturbError::Invalid(_) | PerturbError::UnknownCode(_)) => {
                Exit::Validation
            }
            _ => Exit::RunFailure,
        };
        CliError {
            exit,
            message: e.to_string(),
            checkpoint: if exit == Exit::Resumable {
                run_dir
            } else {
                None
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Io { .. } | TaskError::NoSamples => CliError::run(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<PerturbError> for CliError {
    fn from(e: PerturbError) -> Self {
        match e {
            PerturbError::UnknownCode(_) | PerturbError::Invalid(_) => {
                CliError::validation(e.to_string())
            }
            _ => CliError::run(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Script(_)
            | BackendError::MissingCredential(_)
            | BackendError::InvalidRequest(_) => CliError::validation(e.to_string()),
            _ => CliError::run(e.to_string()),
        }
    }
}
