use std::fmt;
use std::path::PathBuf;

/// Errors surfaced by the command-line front end.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit status 2.
    Usage(String),
    Core(aigc_alloc::Error),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A check that ran to completion but did not pass.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(aigc_alloc::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<aigc_alloc::Error> for CliError {
    fn from(e: aigc_alloc::Error) -> Self {
        CliError::Core(e)
    }
}
