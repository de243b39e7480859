use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] physjoint_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl ToString) -> Error {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            msg: msg.to_string(),
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Core(physjoint_core::Error::Config(_)) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for anything that
    /// failed while running.
    pub fn exit_code(&self) -> i32 {
        if self.is_config() {
            2
        } else {
            3
        }
    }
}
