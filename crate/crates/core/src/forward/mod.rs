//! Forward planning: optimize the policy against a differentiable forward
//! approximation of the success probability.

pub mod graph;
pub mod planner;

pub use graph::{build_forward_graph, ComputeGraph, Op};
pub use planner::{random_policy, rollout_bp_plan, rollout_scores, sogbofa_plan, GradConfig};
