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

    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("duplicate problem id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("invalid environment spec: {0}")]
    InvalidEnvSpec(String),

    #[error("trajectory does not belong to problem `{problem}`: {reason}")]
    EnvMismatch { problem: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown candidate {choice} in a context with {candidates} candidates")]
    UnknownCandidate { choice: usize, candidates: usize },

    #[error("no candidate steps available")]
    EmptyCandidates,

    #[error("tree has no node eligible for branching")]
    NoEligibleNode,

    #[error("unknown prefix {0:?}")]
    UnknownPrefix(Vec<u16>),

    #[error("backend configuration error: {0}")]
    BackendConfig(String),

    #[error("backend request failed after {attempts} attempt(s): {message}")]
    Backend { attempts: usize, message: String },

    #[error("malformed document: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
