use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Engine(#[from] csalloc::Error),

    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    /// Process exit code: 1 failed verification, 2 bad input, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Engine(e) if e.is_configuration() => 2,
            CliError::Engine(_) => 3,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}
