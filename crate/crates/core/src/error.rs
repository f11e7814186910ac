use thiserror::Error;

use crate::engine::ChartModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite likelihood at record {index}: {detail}")]
    NonFiniteLikelihood { index: usize, detail: String },

    #[error(
        "fit did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        best: Option<Box<ChartModel>>,
    },

    #[error("rank-deficient design: collinear columns {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("unsupported artifact format version {found} (this build reads up to {supported})")]
    Version { found: u64, supported: u64 },

    #[error("unknown distribution family tag {0:?}")]
    UnknownFamily(String),

    #[error("duplicate measurement for scan {scan_id} / structure {structure_id}")]
    DuplicateRecord {
        scan_id: String,
        structure_id: String,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("model backend failure: {0}")]
    Backend(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end:
    /// 1 contract error, 2 numerical failure, 3 backend or I/O failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::ParameterDomain(_)
            | Error::Domain(_)
            | Error::Contract(_)
            | Error::RankDeficient { .. }
            | Error::Version { .. }
            | Error::UnknownFamily(_)
            | Error::DuplicateRecord { .. }
            | Error::Parse(_) => 1,
            Error::Numerical(_)
            | Error::NonFiniteLikelihood { .. }
            | Error::NonConvergence { .. } => 2,
            Error::Backend(_) | Error::Io(_) => 3,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
            _ => Error::Parse(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
