use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("extent {extent} is not divisible into {parts} parts")]
    Divisibility { extent: usize, parts: usize },

    #[error("pyramid level {level}: {source}")]
    Level {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("triplet mining failed: identity {identity} has no {missing} in the batch")]
    Mining {
        identity: usize,
        missing: &'static str,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("zero-norm {side} vector (row {row}) under cosine distance")]
    DegenerateVector { side: &'static str, row: usize },

    #[error("query {query} has no valid gallery match")]
    NoValidMatch { query: usize },

    #[error("tape: {0}")]
    Tape(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by model geometry (split divisibility, extents).
    pub fn is_geometry(&self) -> bool {
        match self {
            Error::Divisibility { .. } | Error::Geometry(_) | Error::Dimension { .. } => true,
            Error::Level { source, .. } => source.is_geometry(),
            _ => false,
        }
    }
}
