//! Information-bottleneck guided tree sampling and step-level policy
//! optimization for sequence policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: synthetic tree-structured reasoning environments, outcome
//!   verifiers and problem-file ingestion.
//! - [`policy`]: the tabular step policy, reference snapshots and the remote
//!   completion-backend adapter.
//! - [`ibscore`]: Tsallis step entropy, Bayes posteriors, reward densities,
//!   the `(eta1, eta2)` decomposition and the IB-Score itself.
//! - [`ibtree`]: the sample tree and its branching strategies.
//! - [`advantage`]: local IB advantage, global advantage and the group
//!   normalised baseline.
//! - [`optimizer`]: clipped surrogate, KL penalty, entropy bonus and the
//!   gradient step.
//! - [`diagnostics`]: Eff-Rate, Avg-Rate, pass@k, offline IB-Score evaluation
//!   and the metrics sink.
//! - [`oracles`]: brute-force reference computations used by tests and the
//!   `oracle` command. Nothing outside this module calls into it for results
//!   that it is meant to check.

pub mod advantage;
pub mod diagnostics;
pub mod env;
mod error;
pub mod ibscore;
pub mod ibtree;
pub mod optimizer;
pub mod oracles;
pub mod policy;
pub mod seed;

pub use error::{Error, Result};
