//! Mean-field variational inference over every latent node of the unrolled
//! network, with closed-form coordinate updates.
//!
//! Each latent node `n` gets its own distribution `q_n`. Updating `n` sets
//! `q_n(v) ∝ exp(E[log p(n = v | pa(n))] + Σ_children E[log p(child | .., n = v, ..)])`
//! with expectations under all other factors. Zero table entries are read
//! as `log ε`, and every `q_n` is kept at least `ε` per value, so the update
//! is the exact maximizer of the (clamped) ELBO over that coordinate and
//! the objective never decreases.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dbn::{unroll, EvidenceMode, NodeGroup, NodeId, NodeKind, UnrolledDbn};
use crate::error::{Error, Result};
use crate::model::{FactoredMdp, StartState, State};
use crate::policy::{argmax_low, ActionAssignment, Diagnostics, PolicyParams};

/// Lower bound on every variational probability and on table entries inside
/// logarithms.
pub const EPSILON: f64 = 1e-6;

/// Fully factorized posterior: one distribution per node. Evidence nodes hold
/// their observed point mass and are never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    dists: Vec<Vec<f64>>,
    latent: Vec<bool>,
}

impl VariationalPosterior {
    /// Uniform distributions on every latent node.
    pub fn init(dbn: &UnrolledDbn) -> Self {
        let mut dists = Vec::with_capacity(dbn.len());
        let mut latent = Vec::with_capacity(dbn.len());
        for (id, node) in dbn.nodes.iter().enumerate() {
            match dbn.evidence.get(&id) {
                Some(&v) => {
                    let mut d = vec![0.0; node.card];
                    d[v] = 1.0;
                    dists.push(d);
                    latent.push(false);
                }
                None => {
                    dists.push(vec![1.0 / node.card as f64; node.card]);
                    latent.push(true);
                }
            }
        }
        VariationalPosterior { dists, latent }
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }

    pub fn num_latent(&self) -> usize {
        self.latent.iter().filter(|&&l| l).count()
    }

    pub fn is_latent(&self, id: NodeId) -> bool {
        self.latent[id]
    }

    pub fn dist(&self, id: NodeId) -> &[f64] {
        &self.dists[id]
    }

    /// Replaces the distribution of a latent node. Panics on evidence nodes.
    pub fn set_dist(&mut self, id: NodeId, d: &[f64]) {
        assert!(self.latent[id], "evidence nodes are not variational parameters");
        assert_eq!(d.len(), self.dists[id].len());
        self.dists[id].copy_from_slice(d);
    }

    /// Largest absolute change of any parameter between `self` and `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.dists
            .iter()
            .flatten()
            .zip(other.dists.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Whether every latent distribution is normalized and at least `ε`.
    pub fn is_valid(&self) -> bool {
        self.dists.iter().zip(&self.latent).all(|(d, &l)| {
            let s: f64 = d.iter().sum();
            (s - 1.0).abs() < 1e-9 && (!l || d.iter().all(|&p| p >= EPSILON * (1.0 - 1e-9)))
        })
    }

    /// The action distributions laid out as policy parameters.
    pub fn action_params(&self, dbn: &UnrolledDbn) -> PolicyParams {
        let mut p = PolicyParams::uniform(&dbn.action_cards(), dbn.lookahead);
        for t in 0..dbn.lookahead {
            for l in 0..dbn.num_action_vars() {
                p.set_dist(t, l, &self.dists[dbn.action_node(t, l)]);
            }
        }
        p
    }

    /// Per-variable argmax of the action distributions, ties toward 0.
    pub fn argmax_plan(&self, dbn: &UnrolledDbn) -> Vec<State> {
        (0..dbn.lookahead)
            .map(|t| {
                (0..dbn.num_action_vars())
                    .map(|l| argmax_low(&self.dists[dbn.action_node(t, l)]))
                    .collect()
            })
            .collect()
    }
}

/// Which latent nodes a sweep updates. Actions are always updated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateMask {
    pub groups: BTreeSet<NodeGroup>,
    /// When set, only these state variables (model indices) are updated
    /// even if the state group is included.
    pub state_vars: Option<Vec<usize>>,
}

impl UpdateMask {
    pub fn all() -> Self {
        UpdateMask {
            groups: [NodeGroup::States, NodeGroup::Actions, NodeGroup::Rewards, NodeGroup::Cumulatives].into(),
            state_vars: None,
        }
    }

    /// Every group except states, which keep their initial value.
    pub fn no_states() -> Self {
        let mut m = Self::all();
        m.groups.remove(&NodeGroup::States);
        m
    }

    /// All non-state groups plus the listed state variables.
    pub fn only_state_vars(vars: Vec<usize>) -> Self {
        UpdateMask {
            state_vars: Some(vars),
            ..Self::all()
        }
    }

    pub fn includes(&self, kind: NodeKind) -> bool {
        match kind {
            NodeKind::Action { .. } => true,
            NodeKind::State { var, .. } => {
                self.groups.contains(&NodeGroup::States)
                    && self.state_vars.as_ref().is_none_or(|vs| vs.contains(&var))
            }
            k => self.groups.contains(&k.group()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOrder {
    /// `t` ascending; within a slice states, actions, rewards, cumulatives.
    TimeMajor,
    /// The time-major order reversed.
    ReverseTime,
}

/// A phase of a staged schedule: `mask` updated for at most `max_sweeps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub mask: UpdateMask,
    pub max_sweeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfviConfig {
    pub max_sweeps: usize,
    /// Stop once no parameter moved more than this during a sweep.
    pub stop_tol: f64,
    /// EM rounds of the forward planner.
    pub outer_iterations: usize,
    /// Keep `φ` between EM rounds instead of resetting it to uniform.
    pub warm_start: bool,
    pub order: SweepOrder,
    /// Phases run before the main mask, each to its own convergence.
    pub stages: Vec<Stage>,
}

impl Default for MfviConfig {
    fn default() -> Self {
        MfviConfig {
            max_sweeps: 100,
            stop_tol: 0.1,
            outer_iterations: 3,
            warm_start: true,
            order: SweepOrder::TimeMajor,
            stages: Vec::new(),
        }
    }
}

impl MfviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 || self.outer_iterations == 0 {
            return Err(Error::Domain("max_sweeps and outer_iterations must be at least 1".into()));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::Domain("stop_tol must be positive".into()));
        }
        if self.stages.iter().any(|s| s.max_sweeps == 0) {
            return Err(Error::Domain("every stage needs at least one sweep".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Converged,
    MaxSweeps,
}

/// ELBO change of one coordinate update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboDelta {
    pub sweep: usize,
    pub group: NodeGroup,
    pub node: NodeId,
    pub delta: f64,
}

/// ELBO bookkeeping of a run. `start + Σ updates + Σ policy_steps = end`
/// up to rounding.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ElboTrace {
    pub start: f64,
    pub end: f64,
    pub updates: Vec<ElboDelta>,
    /// ELBO change of each M-step (`θ ← q(a)`) of the forward planner.
    pub policy_steps: Vec<f64>,
}

impl ElboTrace {
    /// Sum of coordinate-update deltas per group.
    pub fn group_totals(&self) -> BTreeMap<NodeGroup, f64> {
        let mut out = BTreeMap::new();
        for d in &self.updates {
            *out.entry(d.group).or_insert(0.0) += d.delta;
        }
        out
    }

    /// Fraction of the summed coordinate-update gain due to `group`.
    pub fn share(&self, group: NodeGroup) -> f64 {
        let totals = self.group_totals();
        let all: f64 = totals.values().sum();
        if all == 0.0 {
            return 0.0;
        }
        totals.get(&group).copied().unwrap_or(0.0) / all
    }

    pub fn reconciliation_error(&self) -> f64 {
        let sum: f64 = self.updates.iter().map(|d| d.delta).sum::<f64>() + self.policy_steps.iter().sum::<f64>();
        (self.end - self.start - sum).abs()
    }
}

/// Clamped log-tables and factor membership of a network.
pub struct MeanField<'a> {
    dbn: &'a UnrolledDbn,
    log_cpt: Vec<Vec<f64>>,
    /// Factors (named by their child node) whose scope contains each node.
    factors_of: Vec<Vec<NodeId>>,
    parent_cards: Vec<Vec<usize>>,
}

fn clamped_log(p: f64) -> f64 {
    p.max(EPSILON).ln()
}

fn entropy(d: &[f64]) -> f64 {
    -d.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `q(v) ∝ exp(u_v)` restricted to `q(v) ≥ ε`: the entries that would fall
/// below `ε` are pinned there and the rest share the remaining mass in the
/// unconstrained proportions.
pub fn clamped_softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = u.iter().map(|x| (x - max).exp()).collect();
    let mut pinned = vec![false; u.len()];
    loop {
        let free: f64 = w.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(x, _)| x).sum();
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let mass = 1.0 - n_pinned as f64 * EPSILON;
        let q: Vec<f64> = w
            .iter()
            .zip(&pinned)
            .map(|(x, &p)| if p { EPSILON } else { mass * x / free })
            .collect();
        let mut changed = false;
        for (i, &qi) in q.iter().enumerate() {
            if !pinned[i] && qi < EPSILON {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return q;
        }
    }
}

impl<'a> MeanField<'a> {
    pub fn new(dbn: &'a UnrolledDbn) -> Self {
        let log_cpt = dbn.nodes.iter().map(|n| n.cpt.iter().map(|&p| clamped_log(p)).collect()).collect();
        let factors_of = (0..dbn.len())
            .map(|id| std::iter::once(id).chain(dbn.children(id).iter().copied()).collect())
            .collect();
        let parent_cards = (0..dbn.len()).map(|id| dbn.parent_cards(id)).collect();
        MeanField {
            dbn,
            log_cpt,
            factors_of,
            parent_cards,
        }
    }

    pub fn dbn(&self) -> &UnrolledDbn {
        self.dbn
    }

    /// Expected clamped log of factor `f` under `q`. With `target`, the
    /// target's own distribution is left out and the expectation is split by
    /// its value into `out`; otherwise the scalar total is added to `out[0]`.
    fn factor_expectation(&self, q: &VariationalPosterior, f: NodeId, target: Option<NodeId>, out: &mut [f64]) {
        let node = self.dbn.node(f);
        let parents = &node.parents;
        let cards = &self.parent_cards[f];
        let mut pv = vec![0usize; parents.len()];
        for config in 0..node.num_configs() {
            let mut w = 1.0;
            let mut slot = 0;
            for (&p, &v) in parents.iter().zip(&pv) {
                if Some(p) == target {
                    slot = v;
                } else {
                    w *= q.dists[p][v];
                }
            }
            if w != 0.0 {
                let logs = &self.log_cpt[f][config * node.card..(config + 1) * node.card];
                if Some(f) == target {
                    for (x, l) in logs.iter().enumerate() {
                        out[x] += w * l;
                    }
                } else {
                    let e: f64 = q.dists[f].iter().zip(logs).map(|(qx, l)| qx * l).sum();
                    out[slot] += w * e;
                }
            }
            // Mixed-radix increment, last parent fastest.
            for i in (0..pv.len()).rev() {
                pv[i] += 1;
                if pv[i] < cards[i] {
                    break;
                }
                pv[i] = 0;
            }
        }
    }

    /// `u_v`: expected log-joint terms touching `id` with `id = v`.
    pub fn scores(&self, q: &VariationalPosterior, id: NodeId) -> Vec<f64> {
        let mut u = vec![0.0; self.dbn.node(id).card];
        for &f in &self.factors_of[id] {
            self.factor_expectation(q, f, Some(id), &mut u);
        }
        u
    }

    /// The clamped ELBO `Σ_f E_q[log p̃(f | pa f)] + Σ_latent H(q_n)`.
    pub fn elbo(&self, q: &VariationalPosterior) -> f64 {
        let mut acc = crate::exact::CompensatedSum::default();
        for f in 0..self.dbn.len() {
            let mut out = [0.0];
            self.factor_expectation(q, f, None, &mut out);
            acc.add(out[0]);
        }
        for (d, &l) in q.dists.iter().zip(&q.latent) {
            if l {
                acc.add(entropy(d));
            }
        }
        acc.value()
    }

    /// The new distribution of `id` and the resulting ELBO change, without
    /// modifying `q`.
    pub fn coordinate_update(&self, q: &VariationalPosterior, id: NodeId) -> (Vec<f64>, f64) {
        let u = self.scores(q, id);
        let new = clamped_softmax(&u);
        let old = &q.dists[id];
        let linear: f64 = new.iter().zip(old).zip(&u).map(|((a, b), s)| (a - b) * s).sum();
        let delta = linear + entropy(&new) - entropy(old);
        (new, delta)
    }

    /// Applies the update of `id` in place and returns the ELBO change.
    pub fn update(&self, q: &mut VariationalPosterior, id: NodeId) -> f64 {
        let (new, delta) = self.coordinate_update(q, id);
        q.dists[id] = new;
        delta
    }

    fn order(&self, order: SweepOrder) -> Vec<NodeId> {
        let mut ids = self.dbn.sweep_order();
        if order == SweepOrder::ReverseTime {
            ids.reverse();
        }
        ids
    }

    /// Sweeps over the masked latent nodes until no parameter moves more
    /// than `stop_tol` in a sweep, or `max_sweeps` sweeps. Deltas are
    /// appended to `trace` with sweep numbers continuing from `sweep_base`.
    pub fn run_sweeps(
        &self,
        q: &mut VariationalPosterior,
        mask: &UpdateMask,
        max_sweeps: usize,
        stop_tol: f64,
        order: SweepOrder,
        sweep_base: usize,
        trace: &mut Vec<ElboDelta>,
    ) -> (usize, StopReason) {
        let ids: Vec<NodeId> = self
            .order(order)
            .into_iter()
            .filter(|&id| q.latent[id] && mask.includes(self.dbn.node(id).kind))
            .collect();
        for sweep in 0..max_sweeps {
            let before = q.clone();
            for &id in &ids {
                let delta = self.update(q, id);
                trace.push(ElboDelta {
                    sweep: sweep_base + sweep,
                    group: self.dbn.node(id).kind.group(),
                    node: id,
                    delta,
                });
            }
            if q.max_abs_diff(&before) < stop_tol {
                return (sweep + 1, StopReason::Converged);
            }
        }
        (max_sweeps, StopReason::MaxSweeps)
    }

    /// Runs the configured stages and then `mask`.
    fn run_schedule(
        &self,
        q: &mut VariationalPosterior,
        cfg: &MfviConfig,
        mask: &UpdateMask,
        sweep_base: usize,
        trace: &mut Vec<ElboDelta>,
    ) -> (usize, StopReason) {
        let mut sweeps = 0;
        for stage in &cfg.stages {
            let (n, _) = self.run_sweeps(q, &stage.mask, stage.max_sweeps, cfg.stop_tol, cfg.order, sweep_base + sweeps, trace);
            sweeps += n;
        }
        let (n, reason) = self.run_sweeps(q, mask, cfg.max_sweeps, cfg.stop_tol, cfg.order, sweep_base + sweeps, trace);
        (sweeps + n, reason)
    }
}

/// Clamped ELBO of `q` on `dbn` (with the policy installed on `dbn`).
pub fn elbo(q: &VariationalPosterior, dbn: &UnrolledDbn) -> f64 {
    MeanField::new(dbn).elbo(q)
}

/// Full output of an MFVI planning call.
#[derive(Debug, Clone)]
pub struct MfviRun {
    pub assignment: ActionAssignment,
    pub posterior: VariationalPosterior,
    /// Final policy prior (uniform for the backward planner).
    pub theta: PolicyParams,
    pub trace: ElboTrace,
    pub stop: StopReason,
}

fn assignment(q: &VariationalPosterior, dbn: &UnrolledDbn, sweeps: usize, reason: StopReason, elbo_per_round: Vec<f64>) -> ActionAssignment {
    ActionAssignment {
        sequence: q.argmax_plan(dbn),
        diagnostics: Diagnostics {
            iterations: sweeps,
            score: *elbo_per_round.last().expect("at least one round"),
            converged: reason == StopReason::Converged,
            trace: elbo_per_round,
        },
    }
}

/// Backward planning: uniform policy prior, one optimization of `φ`, act on
/// the per-variable argmax of the action marginals.
pub fn backward_mfvi(
    mdp: &FactoredMdp,
    start: &State,
    lookahead: usize,
    cfg: &MfviConfig,
    mask: &UpdateMask,
    mode: EvidenceMode,
) -> Result<MfviRun> {
    cfg.validate()?;
    let dbn = unroll(mdp, &StartState::Concrete(start.clone()), lookahead, mode)?;
    let mf = MeanField::new(&dbn);
    let mut q = VariationalPosterior::init(&dbn);
    let start_elbo = mf.elbo(&q);
    let mut updates = Vec::new();
    let (sweeps, stop) = mf.run_schedule(&mut q, cfg, mask, 0, &mut updates);
    let end = mf.elbo(&q);
    Ok(MfviRun {
        assignment: assignment(&q, &dbn, sweeps, stop, vec![end]),
        theta: dbn.policy(),
        posterior: q,
        trace: ElboTrace {
            start: start_elbo,
            end,
            updates,
            policy_steps: Vec::new(),
        },
        stop,
    })
}

pub fn backward_mfvi_plan(
    mdp: &FactoredMdp,
    start: &State,
    lookahead: usize,
    cfg: &MfviConfig,
    mask: &UpdateMask,
    mode: EvidenceMode,
) -> Result<ActionAssignment> {
    Ok(backward_mfvi(mdp, start, lookahead, cfg, mask, mode)?.assignment)
}

/// Forward (EM) planning: alternate the backward optimization of `φ` under
/// the current `θ` with the M-step `θ ← q(a)`. The ELBO is non-decreasing
/// across both steps.
pub fn forward_mfvi(
    mdp: &FactoredMdp,
    start: &State,
    lookahead: usize,
    cfg: &MfviConfig,
    mask: &UpdateMask,
    mode: EvidenceMode,
) -> Result<MfviRun> {
    cfg.validate()?;
    let mut dbn = unroll(mdp, &StartState::Concrete(start.clone()), lookahead, mode)?;
    let mut q = VariationalPosterior::init(&dbn);
    let start_elbo = elbo(&q, &dbn);
    let mut updates = Vec::new();
    let mut policy_steps = Vec::new();
    let mut per_round = Vec::new();
    let mut sweeps = 0;
    let mut stop = StopReason::MaxSweeps;
    for round in 0..cfg.outer_iterations {
        if round > 0 {
            let before = elbo(&q, &dbn);
            dbn.set_policy(&q.action_params(&dbn));
            policy_steps.push(elbo(&q, &dbn) - before);
            if !cfg.warm_start {
                let fresh = VariationalPosterior::init(&dbn);
                let reset = elbo(&fresh, &dbn) - elbo(&q, &dbn);
                q = fresh;
                policy_steps.push(reset);
            }
        }
        let mf = MeanField::new(&dbn);
        let (n, reason) = mf.run_schedule(&mut q, cfg, mask, sweeps, &mut updates);
        sweeps += n;
        stop = reason;
        per_round.push(mf.elbo(&q));
    }
    let end = *per_round.last().expect("outer_iterations >= 1");
    Ok(MfviRun {
        assignment: assignment(&q, &dbn, sweeps, stop, per_round),
        theta: dbn.policy(),
        posterior: q,
        trace: ElboTrace {
            start: start_elbo,
            end,
            updates,
            policy_steps,
        },
        stop,
    })
}

pub fn forward_mfvi_plan(
    mdp: &FactoredMdp,
    start: &State,
    lookahead: usize,
    cfg: &MfviConfig,
    mask: &UpdateMask,
    mode: EvidenceMode,
) -> Result<ActionAssignment> {
    Ok(forward_mfvi(mdp, start, lookahead, cfg, mask, mode)?.assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::builtin::{build_cooking, chain_reward, independent_arms, random_mdp, RandomMdpShape};
    use crate::exact::ExactOracle;

    /// Clamped ELBO by enumerating every joint assignment of the network.
    fn brute_elbo(q: &VariationalPosterior, dbn: &UnrolledDbn) -> f64 {
        let cards: Vec<usize> = dbn.nodes.iter().map(|n| n.card).collect();
        let total: usize = cards.iter().product();
        let mut sum = 0.0;
        let mut x = vec![0usize; cards.len()];
        for _ in 0..total {
            let w: f64 = x.iter().enumerate().map(|(i, &v)| q.dist(i)[v]).product();
            if w > 0.0 {
                let logp: f64 = dbn
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| {
                        let pv: Vec<usize> = n.parents.iter().map(|&p| x[p]).collect();
                        let config = crate::model::config_index(&dbn.parent_cards(i), &pv);
                        n.prob(config, x[i]).max(EPSILON).ln()
                    })
                    .sum();
                sum += w * logp;
            }
            for i in (0..x.len()).rev() {
                x[i] += 1;
                if x[i] < cards[i] {
                    break;
                }
                x[i] = 0;
            }
        }
        let h: f64 = (0..dbn.len()).filter(|&i| q.is_latent(i)).map(|i| entropy(q.dist(i))).sum();
        sum + h
    }

    fn small_dbn(seed: u64, lookahead: usize) -> UnrolledDbn {
        let shape = RandomMdpShape {
            state_vars: 2,
            action_vars: 1,
            reward_factors: 2,
            ..Default::default()
        };
        let mdp = random_mdp(&shape, seed);
        unroll(&mdp, &StartState::Concrete(vec![0, 1]), lookahead, EvidenceMode::Terminal).unwrap()
    }

    #[test]
    fn init_is_uniform_and_skips_evidence() {
        let dbn = small_dbn(1, 2);
        let q = VariationalPosterior::init(&dbn);
        assert_eq!(q.num_latent(), dbn.len() - dbn.evidence.len());
        for id in dbn.latent_nodes() {
            assert!(q.dist(id).iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn elbo_matches_enumeration() {
        for seed in 0..4 {
            let dbn = small_dbn(seed, 1 + seed as usize % 2);
            let mf = MeanField::new(&dbn);
            let mut q = VariationalPosterior::init(&dbn);
            mf.run_sweeps(&mut q, &UpdateMask::all(), 2, 1e-12, SweepOrder::TimeMajor, 0, &mut Vec::new());
            assert!((mf.elbo(&q) - brute_elbo(&q, &dbn)).abs() < 1e-9);
        }
    }

    #[test]
    fn update_is_the_coordinate_maximizer() {
        let dbn = small_dbn(7, 1);
        let mf = MeanField::new(&dbn);
        let q = VariationalPosterior::init(&dbn);
        for id in dbn.latent_nodes() {
            let (new, _) = mf.coordinate_update(&q, id);
            // Golden-section search on the brute-force ELBO along q(id = 1).
            let f = |p: f64| {
                let mut r = q.clone();
                r.set_dist(id, &[1.0 - p, p]);
                brute_elbo(&r, &dbn)
            };
            let (mut a, mut b) = (EPSILON, 1.0 - EPSILON);
            let g = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..80 {
                let (c, d) = (b - g * (b - a), a + g * (b - a));
                if f(c) > f(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let best = (a + b) / 2.0;
            assert!((new[1] - best).abs() < 1e-6, "{}: {} vs {best}", dbn.node(id).label, new[1]);
            assert!(f(new[1]) >= f(best) - 1e-10);
        }
    }

    #[test]
    fn deltas_reconcile_and_never_decrease() {
        let mdp = build_cooking();
        let run = backward_mfvi(&mdp, &vec![0; 8], 4, &MfviConfig::default(), &UpdateMask::all(), EvidenceMode::Terminal).unwrap();
        assert!(run.trace.updates.iter().all(|d| d.delta >= -1e-9));
        assert!(run.trace.reconciliation_error() < 1e-6);
        assert!(run.posterior.is_valid());
    }

    #[test]
    fn no_states_mask_keeps_states_uniform() {
        let mdp = build_cooking();
        let run = backward_mfvi(&mdp, &vec![0; 8], 4, &MfviConfig::default(), &UpdateMask::no_states(), EvidenceMode::Terminal).unwrap();
        let dbn = unroll(&mdp, &StartState::Concrete(vec![0; 8]), 4, EvidenceMode::Terminal).unwrap();
        for id in dbn.latent_nodes() {
            if matches!(dbn.node(id).kind, NodeKind::State { .. }) {
                assert_eq!(run.posterior.dist(id), &[0.5, 0.5]);
            }
        }
    }

    #[test]
    fn loose_tolerance_runs_one_sweep() {
        let mdp = chain_reward(3).unwrap();
        let cfg = MfviConfig {
            stop_tol: 2.0,
            ..Default::default()
        };
        let run = backward_mfvi(&mdp, &vec![0; 3], 4, &cfg, &UpdateMask::all(), EvidenceMode::Terminal).unwrap();
        assert_eq!(run.assignment.diagnostics.iterations, 1);
    }

    #[test]
    fn elbo_stays_below_log_evidence() {
        let mdp = chain_reward(3).unwrap();
        let dbn = unroll(&mdp, &StartState::Concrete(vec![0; 3]), 4, EvidenceMode::Terminal).unwrap();
        let log_z = ExactOracle::new(&dbn).evidence_probability().unwrap().ln();
        let run = backward_mfvi(&mdp, &vec![0; 3], 4, &MfviConfig::default(), &UpdateMask::all(), EvidenceMode::Terminal).unwrap();
        assert!(run.trace.end <= log_z + 1e-9);
    }

    #[test]
    fn forward_em_is_monotone() {
        let mdp = independent_arms(&[0.9, 0.1]).unwrap();
        for lookahead in 1..=3 {
            let cfg = MfviConfig {
                outer_iterations: 4,
                ..Default::default()
            };
            let run = forward_mfvi(&mdp, &vec![0, 0], lookahead, &cfg, &UpdateMask::all(), EvidenceMode::Terminal).unwrap();
            assert!(run.assignment.diagnostics.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
            assert!(run.trace.policy_steps.iter().all(|&d| d >= -1e-9));
            assert!(run.trace.reconciliation_error() < 1e-6);
        }
    }

    #[test]
    fn forward_em_concentrates_on_the_better_arm() {
        let mdp = independent_arms(&[0.9, 0.1]).unwrap();
        let mut last = 0.0;
        for outer in 1..=4 {
            let cfg = MfviConfig {
                outer_iterations: outer,
                ..Default::default()
            };
            let run = forward_mfvi(&mdp, &vec![0, 0], 1, &cfg, &UpdateMask::all(), EvidenceMode::Terminal).unwrap();
            let p = run.theta.prob(0, 0, 1);
            assert!(p >= last);
            last = p;
            assert_eq!(run.assignment.first(), &vec![1]);
        }
        assert!(last > 0.99);
    }

    #[test]
    fn single_step_arms_match_the_exact_posterior() {
        // The posterior over one arm pull factorizes; the only gap left is
        // the ε floor on the impossible reward value.
        let mdp = independent_arms(&[0.9, 0.1]).unwrap();
        let dbn = unroll(&mdp, &StartState::Concrete(vec![0, 0]), 1, EvidenceMode::Terminal).unwrap();
        let exact = ExactOracle::new(&dbn).posterior(dbn.action_node(0, 0)).unwrap();
        let run = backward_mfvi(&mdp, &vec![0, 0], 1, &MfviConfig::default(), &UpdateMask::all(), EvidenceMode::Terminal).unwrap();
        for (a, b) in run.posterior.dist(dbn.action_node(0, 0)).iter().zip(&exact) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn clamped_softmax_respects_floor() {
        let q = clamped_softmax(&[0.0, -40.0, -50.0]);
        assert_eq!(q[1], EPSILON);
        assert_eq!(q[2], EPSILON);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let q = clamped_softmax(&[0.0, 0.0]);
        assert_eq!(q, vec![0.5, 0.5]);
    }
}
