use std::path::PathBuf;

/// Errors produced anywhere in the clustering stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine could not produce a trustworthy answer.
    #[error("numerical error: {message}")]
    Numerical {
        message: String,
        /// Condition number estimate, when one was computed.
        condition: Option<f64>,
    },

    /// A binary file did not match its expected layout.
    #[error("format error in {}: {message} (at byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A dense path was asked to allocate beyond its configured budget.
    #[error("resource error: {0}")]
    Resource(String),

    /// Training loss blew up; the trace collected so far is attached.
    #[error("training diverged at step {step}: loss {loss:.6e} exceeds {limit:.6e}")]
    Diverged {
        step: usize,
        loss: f64,
        limit: f64,
        trace: Vec<f64>,
    },

    /// Iterative solver hit its iteration cap.
    #[error("no convergence after {iterations} iterations (last value {last:.6e})")]
    NotConverged {
        iterations: usize,
        last: f64,
        trace: Vec<f64>,
    },

    /// Misuse of the differentiation tape, or a non-finite gradient.
    #[error("autodiff error at node {node}: {message}")]
    Autodiff { node: String, message: String },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
