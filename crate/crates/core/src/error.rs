use thiserror::Error;
use wm_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("token `{0}` is listed both as a verb and as a preposition")]
    LexiconConflict(String),
    #[error("invalid lexicon token `{0}`: tokens must be lowercase, non-empty and whitespace-free")]
    BadToken(String),
    #[error("instruction has no lexicon verb: \"{0}\"")]
    NoVerb(String),
    #[error("preposition `{token}` precedes every verb in \"{instruction}\"")]
    PrepositionFirst { instruction: String, token: String },
    #[error("action words of \"{instruction}\" do not alternate verb/preposition")]
    NotAlternating { instruction: String },
    #[error("unknown composition in \"{instruction}\"; longest matched prefix: [{}]", matched.join(", "))]
    UnknownComposition { instruction: String, matched: Vec<String> },
    #[error("{n} action pairs exceed the capacity n_max = {n_max}")]
    Capacity { n: usize, n_max: usize },
    #[error("token `{0}` is not in the embedding table")]
    UnknownToken(String),

    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("template rejected: {0}")]
    Template(String),
    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("missing checkpoint for variant `{variant}`: {path}")]
    MissingCheckpoint { variant: String, path: String },
}

pub type Result<T> = std::result::Result<T, Error>;
