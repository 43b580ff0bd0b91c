use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),

    #[error("duplicate query id {0:?}")]
    DuplicateQueryId(String),

    #[error("negative relevance {value} at line {line}")]
    NegativeRelevance { line: usize, value: i64 },

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("corpus is empty (every document tokenizes to nothing)")]
    EmptyCorpus,

    #[error("unknown document id {0:?}")]
    UnknownDocId(String),

    #[error("size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("non-finite value in vector row {row}")]
    NonFiniteVector { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend does not return first-token logprobs")]
    LogprobsUnsupported,

    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("unknown template {0:?}")]
    UnknownTemplate(String),

    #[error("judge could not score {doc_id:?}: neither designated token was returned")]
    JudgeUnavailable { doc_id: String },

    #[error("every candidate failed to be judged for query {0:?}")]
    AllJudgmentsFailed(String),

    #[error("every hypothetical document sample came back empty")]
    AllSamplesEmpty,

    #[error("cannot average an empty vector set")]
    EmptyRelevantSet,

    #[error("no judgment for candidate {0:?}")]
    MissingJudgment(String),

    #[error("run contains no queries")]
    EmptyRun,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid index file: {0}")]
    InvalidIndexFile(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
