use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("refinement diverged: {0}")]
    Diverged(String),

    #[error("association problem too large: {candidates} candidates exceed cap {cap}")]
    SizeLimit { candidates: usize, cap: usize },

    #[error("exact clique search supports at most {max} associations, got {n}")]
    TooLarge { n: usize, max: usize },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// `field` is the path of the offending value, e.g. `landmarks[0].position`,
    /// or empty when the document itself is malformed.
    #[error("{context}: {}{source}", at_field(field))]
    Json {
        context: String,
        field: String,
        #[source]
        source: serde_json::Error,
    },
}

fn at_field(field: &str) -> String {
    if field.is_empty() {
        String::new()
    } else {
        format!("field `{field}`: ")
    }
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
