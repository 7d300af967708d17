//! Algorithm registry: every planner id, its configuration and its call.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use dbnplan_core::bp::{backward_bp_plan, BpConfig};
use dbnplan_core::csvi::{csvi, CsviConfig, Direction};
use dbnplan_core::forward::{rollout_bp_plan, sogbofa_plan, GradConfig};
use dbnplan_core::mfvi::{backward_mfvi, forward_mfvi, ElboTrace, MfviConfig, UpdateMask};
use dbnplan_core::{ActionAssignment, Diagnostics, EvidenceMode, FactoredMdp, State};

/// Every registered planner id, in reporting order.
pub const ALGORITHMS: [&str; 11] = [
    "random",
    "bp-bwd",
    "bp-fwd-sogbofa",
    "bp-fwd-rollout",
    "mfvi-fwd",
    "mfvi-bwd",
    "mfvi-nos",
    "mfvi-exp",
    "csvi-fwd",
    "csvi-bwd",
    "csvi-exp",
];

pub struct PlanOutput {
    pub assignment: ActionAssignment,
    /// Coordinate-update bookkeeping of the variational planners.
    pub elbo: Option<ElboTrace>,
}

impl From<ActionAssignment> for PlanOutput {
    fn from(assignment: ActionAssignment) -> Self {
        PlanOutput { assignment, elbo: None }
    }
}

pub trait Planner: Send + Sync {
    fn id(&self) -> &str;

    /// Resolved configuration, for the manifest lock.
    fn config(&self) -> toml::Table;

    fn plan(&self, mdp: &FactoredMdp, state: &State, lookahead: usize, rng: &mut ChaCha8Rng) -> dbnplan_core::Result<PlanOutput>;
}

/// Uniformly random joint actions.
pub struct RandomPlanner;

impl Planner for RandomPlanner {
    fn id(&self) -> &str {
        "random"
    }

    fn config(&self) -> toml::Table {
        toml::Table::new()
    }

    fn plan(&self, mdp: &FactoredMdp, _: &State, lookahead: usize, rng: &mut ChaCha8Rng) -> dbnplan_core::Result<PlanOutput> {
        let cards = mdp.action_cards();
        let sequence = (0..lookahead).map(|_| cards.iter().map(|&c| rng.gen_range(0..c)).collect()).collect();
        Ok(ActionAssignment {
            sequence,
            diagnostics: Diagnostics::default(),
        }
        .into())
    }
}

enum Kind {
    BpBackward(BpConfig),
    Sogbofa(GradConfig),
    Rollout,
    Mfvi {
        cfg: MfviConfig,
        forward: bool,
        mask: UpdateMask,
        mode: EvidenceMode,
    },
    Csvi {
        cfg: CsviConfig,
        direction: Direction,
        mode: EvidenceMode,
    },
}

pub struct RegisteredPlanner {
    id: String,
    kind: Kind,
}

fn parse<T: DeserializeOwned + Default>(id: &str, config: Option<&toml::Table>) -> anyhow::Result<T> {
    match config {
        None => Ok(T::default()),
        Some(t) => t
            .clone()
            .try_into()
            .map_err(|e| anyhow::anyhow!("invalid configuration for {id}: {e}")),
    }
}

fn to_table<T: serde::Serialize>(v: &T) -> toml::Table {
    toml::Table::try_from(v).expect("configs serialize to tables")
}

/// Builds the planner registered under `id` with optional overrides.
pub fn build_planner(id: &str, config: Option<&toml::Table>) -> anyhow::Result<Box<dyn Planner>> {
    let mfvi = |forward, mask, mode| -> anyhow::Result<Kind> {
        Ok(Kind::Mfvi {
            cfg: parse(id, config)?,
            forward,
            mask,
            mode,
        })
    };
    let csvi_kind = |direction, mode| -> anyhow::Result<Kind> {
        Ok(Kind::Csvi {
            cfg: parse(id, config)?,
            direction,
            mode,
        })
    };
    let kind = match id {
        "random" => {
            if config.is_some_and(|c| !c.is_empty()) {
                anyhow::bail!("random takes no configuration");
            }
            return Ok(Box::new(RandomPlanner));
        }
        "bp-bwd" => Kind::BpBackward(parse(id, config)?),
        "bp-fwd-sogbofa" => Kind::Sogbofa(parse(id, config)?),
        "bp-fwd-rollout" => {
            if config.is_some_and(|c| !c.is_empty()) {
                anyhow::bail!("bp-fwd-rollout takes no configuration");
            }
            Kind::Rollout
        }
        "mfvi-fwd" => mfvi(true, UpdateMask::all(), EvidenceMode::Terminal)?,
        "mfvi-bwd" => mfvi(false, UpdateMask::all(), EvidenceMode::Terminal)?,
        "mfvi-nos" => mfvi(true, UpdateMask::no_states(), EvidenceMode::Terminal)?,
        "mfvi-exp" => mfvi(true, UpdateMask::all(), EvidenceMode::Exponentiated)?,
        "csvi-fwd" => csvi_kind(Direction::Forward, EvidenceMode::Terminal)?,
        "csvi-bwd" => csvi_kind(Direction::Backward, EvidenceMode::Terminal)?,
        "csvi-exp" => csvi_kind(Direction::Forward, EvidenceMode::Exponentiated)?,
        other => anyhow::bail!("unknown algorithm id {other:?}; known: {}", ALGORITHMS.join(", ")),
    };
    match &kind {
        Kind::BpBackward(c) => c.validate()?,
        Kind::Sogbofa(c) => c.validate()?,
        Kind::Mfvi { cfg, .. } => cfg.validate()?,
        Kind::Csvi { cfg, .. } => cfg.validate()?,
        Kind::Rollout => {}
    }
    Ok(Box::new(RegisteredPlanner { id: id.to_string(), kind }))
}

impl Planner for RegisteredPlanner {
    fn id(&self) -> &str {
        &self.id
    }

    fn config(&self) -> toml::Table {
        match &self.kind {
            Kind::BpBackward(c) => to_table(c),
            Kind::Sogbofa(c) => to_table(c),
            Kind::Rollout => toml::Table::new(),
            Kind::Mfvi { cfg, .. } => to_table(cfg),
            Kind::Csvi { cfg, .. } => {
                // The seed is drawn per call from the planner stream.
                let mut t = to_table(cfg);
                t.remove("seed");
                t
            }
        }
    }

    fn plan(&self, mdp: &FactoredMdp, state: &State, lookahead: usize, rng: &mut ChaCha8Rng) -> dbnplan_core::Result<PlanOutput> {
        match &self.kind {
            Kind::BpBackward(cfg) => backward_bp_plan(mdp, state, lookahead, cfg).map(Into::into),
            Kind::Sogbofa(cfg) => sogbofa_plan(mdp, state, lookahead, cfg, rng).map(Into::into),
            Kind::Rollout => rollout_bp_plan(mdp, state, lookahead).map(Into::into),
            Kind::Mfvi {
                cfg,
                forward,
                mask,
                mode,
            } => {
                let run = if *forward {
                    forward_mfvi(mdp, state, lookahead, cfg, mask, *mode)?
                } else {
                    backward_mfvi(mdp, state, lookahead, cfg, mask, *mode)?
                };
                Ok(PlanOutput {
                    assignment: run.assignment,
                    elbo: Some(run.trace),
                })
            }
            Kind::Csvi { cfg, direction, mode } => {
                let cfg = CsviConfig {
                    seed: rng.gen(),
                    ..*cfg
                };
                Ok(csvi(mdp, state, lookahead, &cfg, *direction, *mode)?.assignment.into())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_builds() {
        for id in ALGORITHMS {
            assert_eq!(build_planner(id, None).unwrap().id(), id);
        }
        assert!(build_planner("mfvi-med", None).is_err());
    }

    #[test]
    fn overrides_are_checked() {
        let mut t = toml::Table::new();
        t.insert("max_sweeps".into(), toml::Value::Integer(5));
        assert!(build_planner("mfvi-fwd", Some(&t)).is_ok());
        t.insert("bogus".into(), toml::Value::Integer(1));
        assert!(build_planner("mfvi-fwd", Some(&t)).is_err());
        let mut t = toml::Table::new();
        t.insert("max_sweeps".into(), toml::Value::Integer(0));
        assert!(build_planner("mfvi-fwd", Some(&t)).is_err());
    }
}
