use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("fit did not converge: {0}")]
    NotConverged(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 configuration or data, 3 solver, 4 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Solver(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }

    /// Downstream reader closed the pipe, e.g. `clonesim simulate | head`.
    pub fn is_broken_pipe(&self) -> bool {
        matches!(self, CliError::Io(e) if e.kind() == std::io::ErrorKind::BrokenPipe)
    }
}

impl From<clonesim::Error> for CliError {
    fn from(e: clonesim::Error) -> Self {
        use clonesim::Error as E;
        match e {
            E::StepTooLarge { .. } | E::NonFinite { .. } | E::BeyondHorizon { .. } | E::InvertedSpan { .. } => {
                CliError::Solver(e.to_string())
            }
            E::InvalidData(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                return CliError::Io(io);
            }
            unreachable!("checked by is_io_error");
        }
        CliError::Data(e.to_string())
    }
}
