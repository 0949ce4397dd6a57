use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {field}: {msg}")]
    Format { field: String, msg: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at image {image}, pixel {offset}: {msg}")]
    Data { image: usize, offset: usize, msg: String },

    #[error("stats error: {0}")]
    Stats(String),

    #[error("empty class {0}: every class needs at least one pixel")]
    EmptyClass(usize),

    #[error(
        "mu underflow for class {class}: denominator {denominator:e} <= 0; \
         use upsilon > {min_upsilon:e}"
    )]
    MuUnderflow {
        class: usize,
        denominator: f64,
        min_upsilon: f64,
    },

    #[error("degenerate dataset: class {0} covers every pixel")]
    SingleClass(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at pixel {pixel}, class {class}")]
    NonFinite { pixel: usize, class: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate bound for class {0}: P_k + l_0k = 0")]
    DegenerateBound(usize),

    #[error("vacuous bound: every class has a non-positive denominator; use larger N_k or smaller C(Theta)")]
    VacuousBound,

    #[error("search error: {0}")]
    Search(String),

    #[error("NaN loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.into(),
            source,
        }
    }
}
