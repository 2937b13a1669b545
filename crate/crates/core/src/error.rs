use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("duplicate entry for query {query_id}, passage {passage_id}")]
    Duplicate {
        query_id: String,
        passage_id: String,
    },

    #[error(
        "conflicting judgments for query {query_id}, passage {passage_id}: levels {first} and {second}"
    )]
    ConflictingJudgment {
        query_id: String,
        passage_id: String,
        first: u32,
        second: u32,
    },

    #[error("no text for passage {0}")]
    MissingPassage(String),

    #[error("no query text for query {0}")]
    MissingQuery(String),

    #[error("no relevance score for passage {0}")]
    MissingScore(String),

    #[error("judgment set is empty")]
    EmptyJudgments,

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("backend returned status {status}: {body}")]
    Backend { status: u16, body: String },

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Line number for parse errors, `None` otherwise.
    pub fn line(&self) -> Option<usize> {
        match self {
            Error::Parse { line, .. } => Some(*line),
            Error::Stage { source, .. } => source.line(),
            _ => None,
        }
    }
}
