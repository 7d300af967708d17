//! Fixtures shared by the benchmarks.

use dbnplan_core::domain::load_domain;
use dbnplan_core::{unroll, EvidenceMode, FactoredMdp, State, StartState, UnrolledDbn};

/// Built-in domains the benchmarks sweep over.
pub const DOMAINS: [&str; 3] = ["cooking", "penalty-corridor", "chain-reward-6"];

pub fn domain(name: &str) -> FactoredMdp {
    load_domain(&format!("builtin:{name}")).expect("built-in domain")
}

/// All-zero start state.
pub fn origin(mdp: &FactoredMdp) -> State {
    vec![0; mdp.num_state_vars()]
}

pub fn network(mdp: &FactoredMdp, lookahead: usize, mode: EvidenceMode) -> UnrolledDbn {
    unroll(mdp, &StartState::Concrete(origin(mdp)), lookahead, mode).expect("unrollable")
}
