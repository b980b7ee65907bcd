use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: dpabc::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use dpabc::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core { source, .. } => match source {
                E::InvalidDimension(_)
                | E::Shape { .. }
                | E::BudgetMismatch(_)
                | E::MechanismMismatch { .. }
                | E::IncompleteProfile(_)
                | E::InconsistentProfile(_)
                | E::MissingCapability(_) => 2,
                _ => 3,
            },
        }
    }
}

/// Attaches a stage label to core errors.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for dpabc::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}
