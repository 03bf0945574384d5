use thiserror::Error;

use crate::dyadic_tree::VertexAddress;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid address {path:?} for dimension {dim}: {reason}")]
    InvalidAddress {
        path: Vec<u32>,
        dim: usize,
        reason: String,
    },

    #[error("non-finite g value {value} at {path:?}")]
    Evaluation { path: Vec<u32>, value: f64 },

    /// g failed mid-refinement; the log holds every evaluation made so far.
    #[error("refinement aborted after {} evaluations: {source}", .eval_log.len())]
    RefinementAborted {
        #[source]
        source: Box<Error>,
        eval_log: Vec<(VertexAddress, f64)>,
    },

    #[error("depth limit {limit} exceeded")]
    DepthLimit { limit: usize },

    #[error("measure model lacks the {0} capability")]
    Capability(&'static str),

    #[error("cannot condition on zero-mass cube {0}")]
    DegenerateConditioning(VertexAddress),

    #[error("missing sample statistics for vertex {0}")]
    IncompleteTree(VertexAddress),

    #[error("q = 0 on the ancestor path of {0}; prune the leaf first")]
    ZeroProbabilityPath(VertexAddress),

    #[error("unnormalized density is zero at the current chain state")]
    InvalidChainState,

    #[error("density vanishes on every probe point of cube {0}")]
    DegenerateDensity(VertexAddress),

    #[error("sampler failed at vertex {vertex}: {source}")]
    Sampler {
        vertex: VertexAddress,
        #[source]
        source: Box<Error>,
    },

    #[error("oracle integration did not converge: last {last}, previous {previous} at {cells} cells")]
    OracleNotConverged {
        last: f64,
        previous: f64,
        cells: u64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
