//! Laboratory for asynchronous tabular Q-learning with Polyak-Ruppert averaging.
//!
//! The crate computes the Gaussian limit law of the normalized averaged error
//! `K^{-1/2} Σ_{k=1}^K (Q_k - Q*)` in closed form and checks it against
//! replicated simulation:
//!
//! - [`mdp`]: finite MDPs, the Bellman operator, exact `Q*`, greedy policies.
//! - [`chain`]: the joint chain `y_k = (s_k, a_k, s_{k+1})`, its stationary law,
//!   visitation matrix, mixing times and geometric mixing constants.
//! - [`engine`]: the asynchronous Q-learning loop, partial sums and the
//!   sandwich sequences used as a runtime correctness check.
//! - [`oracle`]: `A`, the Poisson solution, the martingale noise covariance and
//!   the limit covariance `A⁻¹ΣA⁻ᵀ`.
//! - [`harness`]: replicated experiments, projected Wasserstein distances,
//!   functional CLT increments and error-term diagnostics.
//! - [`fixture`]: the on-disk MDP fixture format.

pub mod chain;
pub mod engine;
pub mod fixture;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod validate;

pub use chain::{ChainError, JointChain, Triple};
pub use engine::{EngineError, RunConfig, RunRecord, StepsizeSchedule};
pub use harness::{Experiment, HarnessError};
pub use mdp::{MdpError, MdpModel, PolicyMatrix, QTable};
pub use oracle::{OracleError, TheoryOracle};

/// Crate version stamped into every output header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
