use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] ibis_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration and input problems, 3 for numerical failures,
    /// 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        use ibis_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::DimensionMismatch { .. } | E::InvalidLabel { .. } | E::Unsupported(_) => 2,
                _ => 3,
            },
        }
    }
}
