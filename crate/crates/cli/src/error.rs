use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` has not been run (needed by `{needed_by}`)")]
    MissingStage { stage: String, needed_by: String },

    #[error(
        "stage `{stage}` was produced under config {found}, current config is {expected}; \
         re-run it or pass --allow-config-change"
    )]
    ConfigChanged {
        stage: String,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] retsynth::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 config error, 3 missing dependency, 4 numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use retsynth::Error as E;
        match self {
            CliError::Config(_) | CliError::ConfigChanged { .. } => 2,
            CliError::MissingStage { .. } => 3,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::InvalidInput(_) | E::InfeasibleSplit { .. } => 2,
                E::Missing(_) => 3,
                E::Numerical(_) | E::ZeroVariance { .. } => 4,
                _ => 1,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}
