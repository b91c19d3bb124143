use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Checkpoint(String),

    #[error("{0}")]
    Artifacts(String),

    #[error("{0}")]
    Core(brhier_core::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    /// 2 for numeric and environment faults during training, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(brhier_core::Error::NumericFault(_) | brhier_core::Error::Environment(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<brhier_core::Error> for CliError {
    fn from(e: brhier_core::Error) -> Self {
        CliError::Core(e)
    }
}
