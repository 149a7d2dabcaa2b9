use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CssError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CssError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault in {op}: non-finite value")]
    NumericFault { op: String },

    #[error("catalog capacity exceeded: {requested} items requested, {available} distinct tuples available")]
    Capacity { requested: usize, available: usize },

    #[error("unknown token id {0}")]
    Vocabulary(usize),

    #[error("could not form a triplet: {0}")]
    NoTriplet(String),

    #[error("training diverged: loss term {term} is not finite")]
    Diverged { term: String },

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl CssError {
    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json {
            context: context.into(),
            source,
        }
    }
}
