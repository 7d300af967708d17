//! Compilation of a factored MDP into an all-binary unrolled dynamic
//! Bayesian network.
//!
//! For a lookahead `T` the network holds, per step:
//!
//! * state nodes `s_t^m` for `t in 0..T` and action nodes `a_t^l`;
//! * for `t in 1..=T` the reward sub-network fed by `(s_{t-1}, a_{t-1})`:
//!   with a single reward factor `r_t` carries the normalized reward CPT
//!   directly; with `K > 1` factors there are partial-reward nodes
//!   `pr_t^i`, a collecting chain `cr_t^i` and `r_t` as a deterministic copy
//!   of `cr_t^K`;
//! * cumulative nodes `c_t` with `p(c_t=1 | c_{t-1}, r_t) = ((t-1) c_{t-1} + r_t) / t`.
//!
//! `c_0` and `cr_t^0` are the constant 1 and are folded into the first link
//! of each chain, so they never appear as nodes.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{config_values, FactoredMdp, ParentRef, RewardFactor, StartState};
use crate::policy::PolicyParams;

pub type NodeId = usize;

/// Which observations the planner conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EvidenceMode {
    /// Only `c_T = 1`; rewards normalized linearly.
    Terminal,
    /// `r_t = 1` and `c_t = 1` for every `t`; rewards normalized as `exp(R - R_max)`.
    Exponentiated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    State { var: usize, t: usize },
    Action { var: usize, t: usize },
    /// Partial reward of factor `factor` (0-based) at step `t`.
    PartialReward { factor: usize, t: usize },
    /// Collecting node `cr_t^index` (1-based).
    Collect { index: usize, t: usize },
    Reward { t: usize },
    Cumulative { t: usize },
}

/// Variable groups used for update masks and ELBO attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeGroup {
    States,
    Actions,
    Rewards,
    Cumulatives,
}

impl NodeGroup {
    pub fn name(self) -> &'static str {
        match self {
            NodeGroup::States => "states",
            NodeGroup::Actions => "actions",
            NodeGroup::Rewards => "rewards",
            NodeGroup::Cumulatives => "cumulatives",
        }
    }
}

impl NodeKind {
    pub fn group(self) -> NodeGroup {
        match self {
            NodeKind::State { .. } => NodeGroup::States,
            NodeKind::Action { .. } => NodeGroup::Actions,
            NodeKind::PartialReward { .. } | NodeKind::Collect { .. } | NodeKind::Reward { .. } => {
                NodeGroup::Rewards
            }
            NodeKind::Cumulative { .. } => NodeGroup::Cumulatives,
        }
    }

    /// Time slice the node belongs to for sweep ordering.
    pub fn slice(self) -> usize {
        match self {
            NodeKind::State { t, .. }
            | NodeKind::Action { t, .. }
            | NodeKind::PartialReward { t, .. }
            | NodeKind::Collect { t, .. }
            | NodeKind::Reward { t }
            | NodeKind::Cumulative { t } => t,
        }
    }
}

/// A discrete node with its conditional table. `cpt[config * card + value]`
/// is `p(value | parents = config)`, parent configurations mixed-radix with
/// the last parent fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub label: String,
    pub card: usize,
    pub parents: Vec<NodeId>,
    pub cpt: Vec<f64>,
}

impl Node {
    pub fn num_configs(&self) -> usize {
        self.cpt.len() / self.card
    }

    #[inline]
    pub fn prob(&self, config: usize, value: usize) -> f64 {
        self.cpt[config * self.card + value]
    }
}

/// Global reward normalization constants for one model and mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardNormalization {
    pub mode: EvidenceMode,
    pub min: f64,
    pub max: f64,
}

impl RewardNormalization {
    pub fn for_mdp(mdp: &FactoredMdp, mode: EvidenceMode) -> Self {
        let (min, max) = mdp.reward_range();
        RewardNormalization { mode, min, max }
    }

    /// Whether all raw rewards are equal (every entry then maps to 1).
    pub fn is_constant(&self) -> bool {
        self.max <= self.min
    }
}

/// Maps a raw reward factor to `p(pr = 1 | parents)`.
///
/// Linear mode uses `(R - R_min) / (R_max - R_min)` over the global range;
/// exponentiated mode uses `exp(R - R_max)`. A degenerate range maps every
/// entry to 1.
pub fn normalize_reward_factor(factor: &RewardFactor, norm: &RewardNormalization) -> Result<Vec<f64>> {
    if let Some(v) = factor.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::model(format!(
            "reward factor {} has non-finite value {v}",
            factor.name
        )));
    }
    if !norm.min.is_finite() || !norm.max.is_finite() {
        return Err(Error::model("non-finite reward range"));
    }
    Ok(factor
        .values
        .iter()
        .map(|&r| match norm.mode {
            EvidenceMode::Terminal if norm.is_constant() => 1.0,
            EvidenceMode::Terminal => ((r - norm.min) / (norm.max - norm.min)).clamp(0.0, 1.0),
            EvidenceMode::Exponentiated => (r - norm.max).exp().min(1.0),
        })
        .collect())
}

/// `p(c_t = 1 | c_{t-1}, r_t) = ((t - 1) c_{t-1} + r_t) / t`.
pub fn cumulative_cpt_entry(t: usize, c_prev: u8, r: u8) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("c_0 is clamped to 1 and has no table".into()));
    }
    chain_entry(t, c_prev, r)
}

/// `p(cr_i = 1 | cr_{i-1}, pr_i) = ((i - 1) cr_{i-1} + pr_i) / i`.
pub fn collecting_cpt_entry(i: usize, cr_prev: u8, pr: u8) -> Result<f64> {
    if i == 0 {
        return Err(Error::Domain("cr_0 is clamped to 1 and has no table".into()));
    }
    chain_entry(i, cr_prev, pr)
}

fn chain_entry(k: usize, prev: u8, x: u8) -> Result<f64> {
    if prev > 1 || x > 1 {
        return Err(Error::Domain("chain inputs must be bits".into()));
    }
    Ok(((k - 1) as f64 * prev as f64 + x as f64) / k as f64)
}

/// Binary table (`[p0, p1]` per configuration) of a chain link with both
/// parents present.
fn chain_table(k: usize) -> Vec<f64> {
    let mut cpt = Vec::with_capacity(8);
    for prev in 0..2u8 {
        for x in 0..2u8 {
            let p = chain_entry(k, prev, x).expect("k >= 1");
            cpt.push(1.0 - p);
            cpt.push(p);
        }
    }
    cpt
}

fn binary_table(p1: &[f64]) -> Vec<f64> {
    p1.iter().flat_map(|&p| [1.0 - p, p]).collect()
}

const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

/// Expected raw reward recovered from `p(c_T = 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RawExpectedReward {
    pub value: f64,
    /// False in exponentiated mode, where `value` is `p(c_T = 1)` unchanged.
    pub affine: bool,
}

/// The time-unrolled network together with its evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledDbn {
    pub nodes: Vec<Node>,
    pub evidence: BTreeMap<NodeId, usize>,
    pub lookahead: usize,
    pub mode: EvidenceMode,
    /// Raw per-step reward is `reward_scale * p(r_t = 1) + reward_shift`.
    pub reward_scale: f64,
    pub reward_shift: f64,
    pub num_factors: usize,
    states: Vec<Vec<NodeId>>,
    actions: Vec<Vec<NodeId>>,
    partial: Vec<Vec<NodeId>>,
    collect: Vec<Vec<NodeId>>,
    rewards: Vec<NodeId>,
    cumulative: Vec<NodeId>,
    children: Vec<Vec<NodeId>>,
    /// Diagnostic emitted for a constant reward range.
    pub constant_reward: bool,
}

/// Compiles `mdp` into a `lookahead`-step network with uniform action
/// priors and evidence chosen by `mode`.
pub fn unroll(mdp: &FactoredMdp, start: &StartState, lookahead: usize, mode: EvidenceMode) -> Result<UnrolledDbn> {
    if lookahead == 0 {
        return Err(Error::Domain("lookahead must be at least 1".into()));
    }
    if start.len() != mdp.num_state_vars() {
        return Err(Error::model(format!(
            "start has {} entries, model has {} state variables",
            start.len(),
            mdp.num_state_vars()
        )));
    }
    if mdp.rewards.is_empty() {
        return Err(Error::model("model has no reward factors"));
    }
    let norm = RewardNormalization::for_mdp(mdp, mode);
    let normalized: Vec<Vec<f64>> = mdp
        .rewards
        .iter()
        .map(|f| normalize_reward_factor(f, &norm))
        .collect::<Result<_>>()?;
    let k = mdp.rewards.len();

    let mut b = Builder::default();
    let mut states: Vec<Vec<NodeId>> = Vec::with_capacity(lookahead);
    let mut actions: Vec<Vec<NodeId>> = Vec::with_capacity(lookahead);
    let mut partial = Vec::new();
    let mut collect = Vec::new();
    let mut rewards = Vec::new();
    let mut cumulative: Vec<NodeId> = Vec::new();

    let resolve = |p: ParentRef, st: &[NodeId], ac: &[NodeId], next: &[Option<NodeId>]| -> NodeId {
        match p {
            ParentRef::State(j) => st[j],
            ParentRef::Action(j) => ac[j],
            ParentRef::Next(j) => next[j].expect("synchronic order"),
        }
    };

    for t in 0..=lookahead {
        if t >= 1 {
            let (st, ac) = (&states[t - 1], &actions[t - 1]);
            let mut step_partial = Vec::new();
            let mut step_collect = Vec::new();
            let r = if k == 1 {
                let f = &mdp.rewards[0];
                let parents = f.parents.iter().map(|&p| resolve(p, st, ac, &[])).collect();
                b.push(
                    NodeKind::Reward { t },
                    format!("r@{t}"),
                    2,
                    parents,
                    binary_table(&normalized[0]),
                )
            } else {
                for (i, f) in mdp.rewards.iter().enumerate() {
                    let parents = f.parents.iter().map(|&p| resolve(p, st, ac, &[])).collect();
                    step_partial.push(b.push(
                        NodeKind::PartialReward { factor: i, t },
                        format!("pr[{}]@{t}", f.name),
                        2,
                        parents,
                        binary_table(&normalized[i]),
                    ));
                }
                for i in 1..=k {
                    let (parents, cpt) = if i == 1 {
                        (vec![step_partial[0]], IDENTITY.to_vec())
                    } else {
                        (vec![step_collect[i - 2], step_partial[i - 1]], chain_table(i))
                    };
                    step_collect.push(b.push(
                        NodeKind::Collect { index: i, t },
                        format!("cr{i}@{t}"),
                        2,
                        parents,
                        cpt,
                    ));
                }
                b.push(
                    NodeKind::Reward { t },
                    format!("r@{t}"),
                    2,
                    vec![step_collect[k - 1]],
                    IDENTITY.to_vec(),
                )
            };
            partial.push(step_partial);
            collect.push(step_collect);
            rewards.push(r);
            let c = if t == 1 {
                b.push(NodeKind::Cumulative { t }, format!("c@{t}"), 2, vec![r], IDENTITY.to_vec())
            } else {
                b.push(
                    NodeKind::Cumulative { t },
                    format!("c@{t}"),
                    2,
                    vec![cumulative[t - 2], r],
                    chain_table(t),
                )
            };
            cumulative.push(c);
        }
        if t < lookahead {
            let mut slice: Vec<Option<NodeId>> = vec![None; mdp.num_state_vars()];
            let start_probs = start.probs();
            for &m in mdp.synchronic_topological_order() {
                let name = &mdp.state_vars[m].name;
                let id = if t == 0 {
                    b.push(
                        NodeKind::State { var: m, t },
                        format!("s[{name}]@0"),
                        2,
                        vec![],
                        binary_table(&[start_probs[m]]),
                    )
                } else {
                    let cpt = &mdp.transitions[m];
                    let parents = cpt
                        .parents
                        .iter()
                        .map(|&p| resolve(p, &states[t - 1], &actions[t - 1], &slice))
                        .collect();
                    b.push(
                        NodeKind::State { var: m, t },
                        format!("s[{name}]@{t}"),
                        2,
                        parents,
                        binary_table(&cpt.probs),
                    )
                };
                slice[m] = Some(id);
            }
            states.push(slice.into_iter().map(|s| s.expect("all vars")).collect());
            let mut slice_actions = Vec::with_capacity(mdp.num_action_vars());
            for (l, a) in mdp.action_vars.iter().enumerate() {
                let card = a.card();
                slice_actions.push(b.push(
                    NodeKind::Action { var: l, t },
                    format!("a[{}]@{t}", a.name),
                    card,
                    vec![],
                    vec![1.0 / card as f64; card],
                ));
            }
            actions.push(slice_actions);
        }
    }

    let mut evidence = BTreeMap::new();
    if let StartState::Concrete(s) = start {
        for (m, &v) in s.iter().enumerate() {
            evidence.insert(states[0][m], v);
        }
    }
    match mode {
        EvidenceMode::Terminal => {
            evidence.insert(*cumulative.last().expect("T >= 1"), 1);
        }
        EvidenceMode::Exponentiated => {
            for (&r, &c) in rewards.iter().zip(&cumulative) {
                evidence.insert(r, 1);
                evidence.insert(c, 1);
            }
        }
    }

    let (reward_scale, reward_shift) = match mode {
        EvidenceMode::Terminal if norm.is_constant() => (0.0, k as f64 * norm.min),
        EvidenceMode::Terminal => (k as f64 * (norm.max - norm.min), k as f64 * norm.min),
        EvidenceMode::Exponentiated => (1.0, 0.0),
    };

    let nodes = b.nodes;
    let mut children = vec![Vec::new(); nodes.len()];
    for (id, n) in nodes.iter().enumerate() {
        for &p in &n.parents {
            children[p].push(id);
        }
    }
    Ok(UnrolledDbn {
        nodes,
        evidence,
        lookahead,
        mode,
        reward_scale,
        reward_shift,
        num_factors: k,
        states,
        actions,
        partial,
        collect,
        rewards,
        cumulative,
        children,
        constant_reward: norm.is_constant(),
    })
}

#[derive(Default)]
struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, kind: NodeKind, label: String, card: usize, parents: Vec<NodeId>, cpt: Vec<f64>) -> NodeId {
        self.nodes.push(Node {
            kind,
            label,
            card,
            parents,
            cpt,
        });
        self.nodes.len() - 1
    }
}

impl UnrolledDbn {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn state_node(&self, t: usize, m: usize) -> NodeId {
        self.states[t][m]
    }

    pub fn action_node(&self, t: usize, l: usize) -> NodeId {
        self.actions[t][l]
    }

    pub fn action_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.actions.iter().flatten().copied()
    }

    /// `r_t` for `t in 1..=T`.
    pub fn reward_node(&self, t: usize) -> NodeId {
        self.rewards[t - 1]
    }

    /// `c_t` for `t in 1..=T`.
    pub fn cumulative_node(&self, t: usize) -> NodeId {
        self.cumulative[t - 1]
    }

    pub fn terminal_node(&self) -> NodeId {
        *self.cumulative.last().expect("T >= 1")
    }

    /// Partial-reward nodes of step `t` (empty when the model has one factor).
    pub fn partial_nodes(&self, t: usize) -> &[NodeId] {
        &self.partial[t - 1]
    }

    /// Collecting-chain nodes `cr_t^1..cr_t^K` (empty when `K = 1`).
    pub fn collect_nodes(&self, t: usize) -> &[NodeId] {
        &self.collect[t - 1]
    }

    pub fn num_action_vars(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn action_cards(&self) -> Vec<usize> {
        self.actions
            .first()
            .map(|a| a.iter().map(|&n| self.nodes[n].card).collect())
            .unwrap_or_default()
    }

    pub fn is_evidence(&self, id: NodeId) -> bool {
        self.evidence.contains_key(&id)
    }

    pub fn latent_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|id| !self.evidence.contains_key(id))
    }

    pub fn parent_cards(&self, id: NodeId) -> Vec<usize> {
        self.nodes[id].parents.iter().map(|&p| self.nodes[p].card).collect()
    }

    /// Parent values of `id` for configuration index `config`.
    pub fn config_parent_values(&self, id: NodeId, config: usize) -> Vec<usize> {
        config_values(&self.parent_cards(id), config)
    }

    /// Installs `θ` as the prior of every action node.
    pub fn set_policy(&mut self, theta: &PolicyParams) {
        assert_eq!(theta.steps(), self.lookahead, "policy length must equal lookahead");
        for t in 0..self.lookahead {
            for l in 0..self.actions[t].len() {
                let id = self.actions[t][l];
                self.nodes[id].cpt = theta.dist(t, l);
            }
        }
    }

    pub fn with_policy(mut self, theta: &PolicyParams) -> Self {
        self.set_policy(theta);
        self
    }

    /// The action prior currently installed on the network.
    pub fn policy(&self) -> PolicyParams {
        let mut p = PolicyParams::uniform(&self.action_cards(), self.lookahead);
        for t in 0..self.lookahead {
            for l in 0..self.actions[t].len() {
                p.set_dist(t, l, &self.nodes[self.actions[t][l]].cpt);
            }
        }
        p
    }

    /// Copy of the network without any evidence (forward, no-evidence runs).
    pub fn without_evidence(&self) -> Self {
        let mut d = self.clone();
        d.evidence.clear();
        d
    }

    /// Copy keeping only the start-state evidence.
    pub fn start_evidence_only(&self) -> Self {
        let mut d = self.clone();
        let starts: std::collections::HashSet<NodeId> = self.states[0].iter().copied().collect();
        d.evidence.retain(|id, _| starts.contains(id));
        d
    }

    /// Node order for coordinate sweeps: time-major, and within a slice
    /// states, actions, rewards, cumulatives (node order inside a group).
    pub fn sweep_order(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = (0..self.nodes.len()).collect();
        ids.sort_by_key(|&id| {
            let k = self.nodes[id].kind;
            (k.slice(), k.group(), id)
        });
        ids
    }

    /// Inverts the reward normalization: expected raw return over the
    /// lookahead from `p(c_T = 1)`.
    pub fn raw_expected_reward(&self, p_ct: f64) -> RawExpectedReward {
        match self.mode {
            EvidenceMode::Terminal => RawExpectedReward {
                value: self.lookahead as f64 * (self.reward_scale * p_ct + self.reward_shift),
                affine: true,
            },
            EvidenceMode::Exponentiated => RawExpectedReward {
                value: p_ct,
                affine: false,
            },
        }
    }

    /// Checks the structural invariants of the construction.
    pub fn check_invariants(&self) -> Result<()> {
        for (id, n) in self.nodes.iter().enumerate() {
            if n.parents.iter().any(|&p| p >= id) {
                return Err(Error::model(format!("{} has a parent not preceding it", n.label)));
            }
            let expected: usize = n.card * self.parent_cards(id).iter().product::<usize>();
            if n.cpt.len() != expected {
                return Err(Error::model(format!("{} table has wrong size", n.label)));
            }
            for row in n.cpt.chunks(n.card) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::model(format!("{} has a row summing to {s}", n.label)));
                }
            }
            for &p in &n.parents {
                if self.nodes[p].kind.slice() > n.kind.slice() {
                    return Err(Error::model(format!("{} has a parent later in time", n.label)));
                }
            }
        }
        if self.evidence.values().any(|&v| v > 1) {
            return Err(Error::model("evidence values must be bits"));
        }
        Ok(())
    }
}

/// Raw-unit expected reward for `p(c_T = 1) = p_ct` on `dbn`.
pub fn raw_expected_reward(p_ct: f64, dbn: &UnrolledDbn) -> RawExpectedReward {
    dbn.raw_expected_reward(p_ct)
}
