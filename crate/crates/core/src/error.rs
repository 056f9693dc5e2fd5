use std::fmt;

/// Failure modes shared by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {}", fmt_shapes(.shapes))]
    Dimension { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("invalid axis {axis} for {op} on shape {shape:?}")]
    InvalidAxis { op: &'static str, axis: isize, shape: Vec<usize> },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("ingestion error at {location}: {message}")]
    Ingestion { location: String, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_shapes(shapes: &[Vec<usize>]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" vs ")
}

impl Error {
    pub fn dim(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Dimension {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub fn io(path: impl fmt::Display, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_string(),
            source,
        }
    }

    pub fn ingest(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            Error::Ingestion { .. } | Error::Integrity(_) | Error::Io { .. } | Error::Input(_) => 2,
            Error::Dimension { .. } | Error::InvalidAxis { .. } | Error::Contract(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
