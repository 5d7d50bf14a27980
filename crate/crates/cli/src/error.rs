use simts::SimtsError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] SimtsError),
}

impl CliError {
    /// 0 success, 1 check failed or numerical trouble, 2 usage or config,
    /// 3 I/O or data, 4 shape or compatibility.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                SimtsError::InvalidArgument(_) => 2,
                SimtsError::Io { .. }
                | SimtsError::BadCell { .. }
                | SimtsError::MissingColumn { .. }
                | SimtsError::Csv { .. }
                | SimtsError::TooShort { .. }
                | SimtsError::CorruptCheckpoint { .. }
                | SimtsError::CheckpointVersion { .. } => 3,
                SimtsError::Shape { .. } => 4,
                SimtsError::NonScalarLoss(_)
                | SimtsError::NonFiniteGradient(_)
                | SimtsError::Numerical(_) => 1,
            },
        }
    }
}
