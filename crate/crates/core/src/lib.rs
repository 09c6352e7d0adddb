//! Tabular offline reinforcement learning laboratory.
//!
//! The crate implements conservative policy iteration (CPI), where the
//! reference policy of a KL-regularized policy update is refined every
//! iteration, together with the frozen-reference baseline (behavior
//! regularization, BR), the two-member reference ensemble variant (CPI-RE),
//! exact dynamic-programming oracles, gridworld environments, offline
//! dataset tooling and executable checks of the underlying guarantees.
//!
//! Module map:
//!
//! - [`mdp`]: finite MDP, policy and value-table types.
//! - [`dp`]: policy evaluation, value iteration, in-sample value iteration,
//!   greedy extraction and rollouts.
//! - [`envs`]: the 7×7 gridworld and the four-room layout.
//! - [`data`]: behavior policies, dataset collection, filters and estimators.
//! - [`solvers`]: closed-form policy updates and the CPI / BR / CPI-RE loops.
//! - [`theory`]: randomized checks of policy improvement, the convergence
//!   rate bound and softmax optimality.
//! - [`experiment`]: experiment grids, oracle reports, the percentile study
//!   and CSV/JSON output used by the `cpi-lab` binary.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

pub mod data;
pub mod dp;
pub mod envs;
mod error;
pub mod experiment;
pub mod mdp;
mod seed;
pub mod solvers;
pub mod theory;

pub use error::{Error, Result};
pub use mdp::{Policy, QTable, SupportMask, TabularMdp, VTable};
