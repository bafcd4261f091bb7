use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config: unknown key, missing key, unparsable value, include cycle.
    #[error("{0}")]
    Config(String),
    #[error("{source}")]
    Numerical {
        #[source]
        source: exproj_core::Error,
        /// Report written before failing, if any.
        report: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } | CliError::Io { .. } => 1,
        }
    }

    /// Short category name printed next to the message.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Numerical { source, .. } => match source {
                exproj_core::Error::Domain(_) => "domain",
                exproj_core::Error::Membership(_) => "membership",
                exproj_core::Error::WidenGrid(_) => "grid",
                exproj_core::Error::SolverFailure { .. } => "solver",
                exproj_core::Error::Evaluation(_) => "evaluation",
                exproj_core::Error::Instability(_) => "instability",
                exproj_core::Error::Degenerate(_) => "degenerate",
                exproj_core::Error::Certification(_) => "certification",
                exproj_core::Error::Resource(_) => "resource",
                exproj_core::Error::Parse(_) => "parse",
                exproj_core::Error::Io(_) => "io",
            },
        }
    }
}

impl From<exproj_core::Error> for CliError {
    fn from(source: exproj_core::Error) -> Self {
        // input-shaped failures from the core are config errors
        if source.is_config() {
            CliError::Config(source.to_string())
        } else {
            CliError::Numerical { source, report: None }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
