use thiserror::Error;

use crate::parisi_pde::RegularityReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("membership violation: {0}")]
    Membership(String),
    #[error("grid too narrow: {0}")]
    WidenGrid(String),
    #[error("solver failure: {msg}")]
    SolverFailure {
        msg: String,
        report: Box<RegularityReport>,
    },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("instability: {0}")]
    Instability(String),
    #[error("degenerate run: {0}")]
    Degenerate(String),
    #[error("certification error: {0}")]
    Certification(String),
    #[error("resource error: {0}")]
    Resource(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by bad input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Parse(_) | Error::Domain(_) | Error::Membership(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
