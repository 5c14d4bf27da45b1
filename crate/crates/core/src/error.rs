use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),
    #[error("label `{label}` listed more than once for class `{class}`")]
    DuplicateLabel { class: String, label: String },
    #[error("weight {weight} for `{class}`/`{label}` is outside (0, 1]")]
    WeightOutOfRange {
        class: String,
        label: String,
        weight: f64,
    },
    #[error("prototypical entry `{class}`/`{label}` must have weight 1.0, got {weight}")]
    PrototypicalWeight {
        class: String,
        label: String,
        weight: f64,
    },
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed distribution: components sum to {0}")]
    MalformedDistribution(f64),
    #[error("{0}")]
    Empty(&'static str),
    #[error("forward state is stale: parameters changed or batch differs")]
    StaleForward,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numerical check failed: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("`{}`: {source}", path.display())]
    Path {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attaches `path` to an IO error, for `map_err`.
    pub fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Path {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Numerical(_) => 3,
            Error::Data(_) | Error::Path { .. } | Error::Io(_) | Error::Csv(_) => 2,
            _ => 1,
        }
    }
}
