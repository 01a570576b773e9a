use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Location of a single panel cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellRef {
    pub unit: String,
    pub time: String,
    pub outcome: String,
}

impl fmt::Display for CellRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.unit, self.time, self.outcome)
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    const SHOWN: usize = 10;
    let mut s = items
        .iter()
        .take(SHOWN)
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    if items.len() > SHOWN {
        s.push_str(&format!(" and {} more", items.len() - SHOWN));
    }
    s
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("duplicate record {0}")]
    DuplicateRecord(CellRef),

    #[error("cutoff period `{0}` not found on the time axis")]
    CutoffNotFound(String),

    #[error("{} missing cell(s): {}", .0.len(), join(.0))]
    MissingCells(Vec<CellRef>),

    #[error("unit(s) missing an entire outcome series: {}", join(.0))]
    MissingSeries(Vec<String>),

    #[error("treated pre-treatment SD for outcome `{0}` is below tolerance")]
    DegenerateScale(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("nonpositive total at period `{0}`")]
    NonPositiveTotal(String),

    #[error("nonpositive population: {0}")]
    NonPositivePopulation(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("screening halted at stage {stage} ({name}): no candidates survive")]
    EmptyPool { stage: u8, name: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numerical(_) | Error::DegenerateScale(_) => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
            Error::Csv(e) if e.is_io_error() => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
