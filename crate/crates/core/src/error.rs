use thiserror::Error;

use crate::oracle::OptimizerResult;
use crate::sim::Trace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("eigenvalue computation did not converge for a {0}x{0} matrix")]
    EigenNonConvergence(usize),

    /// A standing assumption of the problem (stabilizability, detectability,
    /// rank of `[A B]`, strict convexity) does not hold.
    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("oracle non-convergence after {} iterations (kkt_grad = {:.3e})", .best.iterations, .best.kkt_grad)]
    OracleNonConvergence { best: Box<OptimizerResult> },

    #[error("optimizer may not exist: objective decreased below {0:e} along the feasible set")]
    Unbounded(f64),

    #[error("non-unique optimizer: KKT matrix is singular (objective not strictly convex on the feasible set?)")]
    NonUniqueOptimizer,

    #[error(
        "algebraic loop not well-posed at this state: Newton residual {residual:.3e} after {iterations} iterations"
    )]
    IllPosedLoop { residual: f64, iterations: usize },

    #[error("simulation aborted at t = {time}: {reason}")]
    Simulation {
        reason: String,
        time: f64,
        partial: Box<Trace>,
    },

    #[error("synthesis failed small-gain test: best gamma {0:.4} >= 1")]
    SynthesisFailed(f64),

    #[error("LMI solver undecided after {0} iterations")]
    SolverUndecided(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for a divergence abort as opposed to a loop-resolution abort.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Simulation { reason, .. } if reason.starts_with("divergence"))
    }
}
