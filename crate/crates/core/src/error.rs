use thiserror::Error;

/// Errors raised across the library. Variants follow the failure classes
/// callers need to distinguish (bad input file vs. bad parameters vs. a
/// numerical breakdown during training).
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid imbalance spec: {0}")]
    Spec(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cannot stratify: {0}")]
    Stratification(String),

    #[error("class {class} has a single instance; separability is undefined")]
    DegenerateClass { class: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite values: {0}")]
    Numerics(String),

    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },

    #[error("empty group: {0}")]
    Group(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("smote error: {0}")]
    Smote(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("validation split is missing classes {missing:?}")]
    ValidationCoverage { missing: Vec<usize> },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True when the error stems from user-supplied parameters rather than
    /// from data or the runtime (CLI maps these to exit code 2).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Spec(_) | Error::Argument(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
