use alloc::string::String;
use core::fmt;

/// Errors raised by the pure algorithmic layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    UnknownClass(String),
    NoSupercategory(String),
    EmptyPool { pool: &'static str, target: String },
    EmptyDataset,
    InsufficientPool { required: usize, available: usize },
    MissingScore { image_id: String, feature: String },
    EmptyInput(&'static str),
    DimensionMismatch { expected: usize, found: usize },
    InvalidArgument(String),
    ZeroVariance,
    NonFiniteLoss { iteration: usize },
    InvalidPolygon(String),
    InvalidRle(String),
    MissingStrategyInput(&'static str),
    InsufficientLabels { present: usize, absent: usize, required: usize },
    UnknownTask(String),
    DuplicateJudgment { task_id: String, annotator_id: String },
    UndefinedAgreement,
    ErrorBudgetExceeded { stage: &'static str, errored: usize, total: usize, budget: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::UnknownClass(c) => write!(f, "unknown class `{c}`"),
            Error::NoSupercategory(c) => write!(f, "class `{c}` has no supercategory"),
            Error::EmptyPool { pool, target } => {
                write!(f, "{pool} pool for `{target}` is empty")
            }
            Error::EmptyDataset => f.write_str("dataset has no usable images"),
            Error::InsufficientPool { required, available } => write!(
                f,
                "insufficient pool for K: need {required} images, have {available}"
            ),
            Error::MissingScore { image_id, feature } => {
                write!(f, "no score for image `{image_id}` and feature `{feature}`")
            }
            Error::EmptyInput(what) => write!(f, "{what} must not be empty"),
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::InvalidArgument(msg) => f.write_str(msg),
            Error::ZeroVariance => f.write_str("undefined correlation: zero variance"),
            Error::NonFiniteLoss { iteration } => {
                write!(f, "loss became non-finite at iteration {iteration}")
            }
            Error::InvalidPolygon(msg) => write!(f, "invalid polygon: {msg}"),
            Error::InvalidRle(msg) => write!(f, "invalid RLE: {msg}"),
            Error::MissingStrategyInput(what) => {
                write!(f, "strategy requires input `{what}`")
            }
            Error::InsufficientLabels { present, absent, required } => write!(
                f,
                "insufficient labels: {present} present and {absent} absent, need {required} of each"
            ),
            Error::UnknownTask(id) => write!(f, "unknown task `{id}`"),
            Error::DuplicateJudgment { task_id, annotator_id } => write!(
                f,
                "annotator `{annotator_id}` already judged task `{task_id}`"
            ),
            Error::UndefinedAgreement => {
                f.write_str("agreement undefined: a bucket has no judgments")
            }
            Error::ErrorBudgetExceeded { stage, errored, total, budget } => write!(
                f,
                "{stage}: {errored} of {total} items errored, over the budget of {budget}"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
