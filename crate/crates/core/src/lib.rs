//! Planning as inference on factored MDPs.
//!
//! A [`FactoredMdp`] is compiled into an all-binary unrolled dynamic Bayesian
//! network ([`dbn::UnrolledDbn`]) whose cumulative-reward node makes the
//! probability of the "success" evidence proportional to expected return.
//! Planners then pick open-loop action sequences with loopy belief
//! propagation ([`bp`], [`forward`]), mean-field variational inference
//! ([`mfvi`]) or collapsed variational inference over actions ([`csvi`]).
//! [`exact`] provides the exact reference computations and [`harness`] the
//! receding-horizon simulation loop.

pub mod bp;
pub mod csvi;
pub mod dbn;
pub mod domain;
pub mod error;
pub mod exact;
pub mod forward;
pub mod mfvi;
pub mod model;
pub mod policy;

pub use dbn::{unroll, EvidenceMode, UnrolledDbn};
pub use error::{Error, Result};
pub use model::{Action, ActionKind, ActionVar, Cpt, FactoredMdp, ParentRef, RewardFactor, StartState, State, StateVar};
pub use policy::{ActionAssignment, Diagnostics, PolicyParams};
