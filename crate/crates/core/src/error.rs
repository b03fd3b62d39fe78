use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate exemplar: {0}")]
    DegenerateExemplar(String),

    #[error("no class has any exemplar; prototypes cannot be built")]
    EmptyPrototype,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("setup failed: {0}")]
    Setup(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
