use std::path::PathBuf;

/// Errors from IO, endpoints, the cache and orchestration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] spurlens_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse { path: PathBuf, offset: usize, line: usize, column: usize, message: String },

    #[error("{path}: field `{field}`: {message}")]
    Field { path: PathBuf, field: String, message: String },

    #[error("image `{image_id}` not found at {path}")]
    MissingImage { image_id: String, path: PathBuf },

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("{endpoint} endpoint: protocol error: {message}")]
    Protocol { endpoint: String, message: String },

    #[error("{endpoint} endpoint: request failed after {attempts} attempt(s): {message}")]
    Transport { endpoint: String, attempts: u32, message: String },

    #[error("offline mode: no cached {kind} response for key {key}")]
    CacheMiss { kind: &'static str, key: String },

    #[error("{stage}: {errored} of {total} items errored, over the budget of {budget}; first: {first}")]
    Budget { stage: &'static str, errored: usize, total: usize, budget: f64, first: String },

    #[error("cache: {0}")]
    Cache(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wrap with a description of where the failure happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Failures confined to one image or request, which count against the
    /// error budget instead of aborting the run.
    pub fn is_item_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::Transport { .. } | Error::Protocol { .. } | Error::MissingImage { .. } | Error::Field { .. }
        )
    }

    /// The innermost error, skipping context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Translate a serde_json position to a byte offset within `text`.
pub fn json_parse_error(path: impl Into<PathBuf>, text: &str, err: &serde_json::Error) -> Error {
    let (line, column) = (err.line(), err.column());
    let offset = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + column.saturating_sub(1);
    Error::Parse { path: path.into(), offset, line, column, message: err.to_string() }
}
