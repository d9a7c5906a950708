use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    Contract(String),

    #[error("JSON parse error in {path} at byte {offset} (line {line}, column {column}): {message}")]
    JsonParse {
        path: String,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema violation in {path}: missing or invalid field `{field}` (qa id: {id})")]
    Schema {
        path: String,
        field: String,
        id: String,
    },

    #[error("answer validation failed for id {id}: {reason}")]
    AnswerMismatch { id: String, reason: String },

    #[error("translation for unknown example id {0}")]
    OrphanTranslation(String),

    #[error("duplicate translation for id {id} in language {lang}")]
    DuplicateTranslation { id: String, lang: String },

    #[error("duplicate example id {0}")]
    DuplicateId(String),

    #[error("question of example {id} has {len} tokens, exceeding max_len - 3 = {limit}")]
    QuestionTooLong { id: String, len: usize, limit: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds max_position {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("example id {0} not found")]
    MissingId(String),

    #[error("language {lang} not present in example {id}")]
    MissingLanguage { id: String, lang: String },

    #[error("hidden size mismatch: {0}")]
    HiddenMismatch(String),

    #[error("source-language mismatch: model expects {expected:?}, batch has {found:?}")]
    SourceMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("every position is masked")]
    AllMasked,

    #[error("empty passage range")]
    EmptyPassage,

    #[error("invalid hyperparameters {input:?}: {reason}")]
    HyperParams { input: String, reason: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss in stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
