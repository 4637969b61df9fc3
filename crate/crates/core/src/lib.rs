//! Exact softmax policy-gradient dynamics on tabular discounted MDPs.
//!
//! The crate builds a chain-like hard MDP on which policy gradient with exact
//! gradients needs a number of iterations that blows up along the chain, runs
//! policy gradient and natural policy gradient on it with full
//! instrumentation, and checks the structural facts behind that behaviour.

pub mod error;
pub mod eval;
pub mod hard;
pub mod instance;
pub mod mdp;
pub mod mdp_text;
pub mod numeric;
pub mod pg;
pub mod random;
pub mod sequence;
pub mod verify;

pub use error::{Error, Result};
pub use eval::{policy_evaluation, policy_evaluation_with, value_iteration, EvalResult, OptimalSolution, Solver};
pub use hard::{
    build_hard_mdp, build_modified_mdp, closed_form_optimal, closed_form_values, collapsed_instance, derive_layout,
    HardInstance, HardMdpParams, KeyParams, StateClass, StateLayout, Variant,
};
pub use instance::{collapse, CollapsedMap, Instance};
pub use mdp::{softmax_policy, validate_mdp, Policy, PolicyLogits, StateDist, TabularMdp};
pub use pg::{run, Algorithm, PgConfig, RunResult, StopReason};
