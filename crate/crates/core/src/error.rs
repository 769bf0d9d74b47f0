use thiserror::Error;

/// Errors raised by the numerical core, the model and the data loaders.
///
/// The `Display` form of each variant starts with a stable short code
/// (`shape`, `not-psd`, ...) so callers and logs can match on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-reduction: {0}")]
    EmptyReduction(String),
    #[error("not-symmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),
    #[error("not-psd: eigenvalue {value:e} below -1e-10 * {max:e}")]
    NotPsd { value: f64, max: f64 },
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("k-too-large: k={k} exceeds n={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("too-large-for-oracle: n={0} exceeds 7")]
    TooLargeForOracle(usize),
    #[error("not-fitted: {0}")]
    NotFitted(String),
    #[error("format: {0}")]
    Format(String),
    #[error("inconsistent: {0}")]
    Inconsistent(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable code of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyReduction(_) => "empty-reduction",
            Error::NotSymmetric(_) => "not-symmetric",
            Error::NotPsd { .. } => "not-psd",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Numerical(_) => "numerical",
            Error::KTooLarge { .. } => "k-too-large",
            Error::TooLargeForOracle(_) => "too-large-for-oracle",
            Error::NotFitted(_) => "not-fitted",
            Error::Format(_) => "format",
            Error::Inconsistent(_) => "inconsistent",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
