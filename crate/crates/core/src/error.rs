use thiserror::Error;

/// Which static no-arbitrage bound a quote violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceBound {
    Lower,
    Upper,
}

impl std::fmt::Display for PriceBound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PriceBound::Lower => f.write_str("lower"),
            PriceBound::Upper => f.write_str("upper"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no implied volatility: price {price} at or beyond the {bound} bound {limit}")]
    NoSolution {
        bound: PriceBound,
        price: f64,
        limit: f64,
    },

    #[error("solver did not converge after {iterations} iterations, last bracket [{lo}, {hi}]")]
    Convergence { iterations: usize, lo: f64, hi: f64 },

    #[error("grid coverage error: {} uncovered nodes (first: {:?})", .nodes.len(), .nodes.first())]
    Coverage { nodes: Vec<(usize, usize)> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite values in layer `{layer}`")]
    Numeric { layer: String },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
