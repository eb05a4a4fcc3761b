use std::fmt;

/// Failures of a subcommand, each tied to a process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or input files.
    Invalid(String),
    /// Training produced a non-finite value.
    NonFinite(String),
    Io(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Io(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    /// Prefixes the message with the run or file it concerns.
    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Invalid(m) => CliError::Invalid(format!("{what}: {m}")),
            CliError::NonFinite(m) => CliError::NonFinite(format!("{what}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{what}: {m}")),
            CliError::Internal(m) => CliError::Internal(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::NonFinite(m) => write!(f, "training aborted: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl From<ciss::Error> for CliError {
    fn from(e: ciss::Error) -> Self {
        use ciss::numcore::NumError;
        use ciss::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFiniteLoss { .. } | E::Num(NumError::NonFinite { .. }) => CliError::NonFinite(msg),
            E::Io(_) | E::Checkpoint(_) => CliError::Io(msg),
            E::Csv(ref c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => CliError::Io(msg),
            E::Json(ref j) if j.is_io() => CliError::Io(msg),
            E::InvalidParams(_) | E::TooManyClasses { .. } | E::InvalidPlan(_) | E::EmptyStep { .. } => {
                CliError::Invalid(msg)
            }
            _ => CliError::Internal(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
