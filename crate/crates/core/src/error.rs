use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("token grid error: {0}")]
    Grid(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined similarity: {0}")]
    Similarity(String),

    #[error(
        "gradient check failed for {name}: worst relative error {worst:.3e} exceeds {tol:.1e}"
    )]
    GradCheck { name: String, worst: f64, tol: f64 },

    #[error("reconciliation failure in {block}: {detail}")]
    Reconcile { block: String, detail: String },

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
