use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("node id {id} out of range for graph with {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },

    #[error("homophily ratio is undefined for a graph without edges")]
    UndefinedRatio,

    #[error("class {class} has no edge endpoints; compatibility row is undefined")]
    EmptyClassRow { class: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty node mask passed to {0}")]
    EmptyMask(&'static str),

    #[error("sinkhorn did not converge after {iters} iterations (worst sum deviation {worst:e})")]
    SinkhornConvergence { iters: usize, worst: f64 },

    #[error("sinkhorn input has no total support: {0}")]
    SinkhornSupport(String),

    #[error("graph generation failed at node {step}: {reason}")]
    Generation { step: usize, reason: String },

    #[error("infeasible feature injection: class {class} needs {needed} reference nodes, pool has {available}")]
    Injection {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch} ({phase})")]
    Divergence { epoch: usize, phase: &'static str },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
