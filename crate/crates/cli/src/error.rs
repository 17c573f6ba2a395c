use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] rerank_lab::Error),

    #[error("missing input file {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// 2 for a missing input, 3 for bad data, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::Lib(e) if e.is_missing_file() => 2,
            CliError::Lib(e) if e.is_data_error() => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingFile(_) => "missing-file",
            CliError::Lib(e) if e.is_missing_file() => "missing-file",
            CliError::Lib(e) if e.is_data_error() => "data",
            CliError::Lib(rerank_lab::Error::Io { .. }) | CliError::Io { .. } => "io",
            CliError::Lib(_) => "invalid-argument",
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
        }
    }

    /// One tab-separated line; tabs and newlines in the message are
    /// flattened to spaces.
    pub fn report_line(&self) -> String {
        let message: String = self
            .to_string()
            .chars()
            .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("error\tkind={}\tcode={}\tmessage={message}", self.kind(), self.exit_code())
    }
}
