//! Exact reference computations.
//!
//! Two independent routes are provided. [`ExactOracle`] runs variable
//! elimination on the unrolled network (with barren-node pruning and
//! compensated summation), which is what every approximate engine is
//! compared against. [`policy_return`] propagates the joint state
//! distribution of the MDP directly, without going through the network, and
//! serves as the ground truth for open-loop plan values.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::dbn::{unroll, EvidenceMode, NodeId, UnrolledDbn};
use crate::error::{Error, Result};
use crate::model::{config_index, config_values, Action, FactoredMdp, StartState};
use crate::policy::PolicyParams;

/// Largest intermediate factor the eliminator will build.
pub const MAX_FACTOR_ENTRIES: usize = 1 << 26;

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// A non-negative table over discrete variables, mixed-radix with the last
/// variable fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub vars: Vec<NodeId>,
    pub cards: Vec<usize>,
    pub table: Vec<f64>,
}

impl Factor {
    /// The conditional table of `id` as a factor over `(parents.., id)`.
    pub fn from_node(dbn: &UnrolledDbn, id: NodeId) -> Self {
        let node = dbn.node(id);
        let mut vars = node.parents.clone();
        vars.push(id);
        let cards = vars.iter().map(|&v| dbn.node(v).card).collect();
        Factor {
            vars,
            cards,
            table: node.cpt.clone(),
        }
    }

    /// Zeroes every entry inconsistent with `var = value` (the variable stays
    /// in scope so that it is summed out like any other).
    pub fn observe(&mut self, var: NodeId, value: usize) {
        let Some(pos) = self.vars.iter().position(|&v| v == var) else {
            return;
        };
        for (i, x) in self.table.iter_mut().enumerate() {
            if config_values(&self.cards, i)[pos] != value {
                *x = 0.0;
            }
        }
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.table.iter().copied())
    }

    /// Value at a full assignment given in `self.vars` order.
    pub fn at(&self, values: &[usize]) -> f64 {
        self.table[config_index(&self.cards, values)]
    }
}

/// Multiplies `factors` and sums out every variable not in `keep`; the result
/// has its variables in `keep` order. Sums use compensated accumulation.
pub fn multiply_and_marginalize(factors: &[&Factor], keep: &[NodeId]) -> Result<Factor> {
    let mut scope: Vec<NodeId> = keep.to_vec();
    let mut card_of: BTreeMap<NodeId, usize> = BTreeMap::new();
    for f in factors {
        for (&v, &c) in f.vars.iter().zip(&f.cards) {
            card_of.insert(v, c);
            if !scope.contains(&v) {
                scope.push(v);
            }
        }
    }
    for v in keep {
        if !card_of.contains_key(v) {
            return Err(Error::Domain(format!("variable {v} is not in any factor")));
        }
    }
    let cards: Vec<usize> = scope.iter().map(|v| card_of[v]).collect();
    let out_size: usize = cards[..keep.len()].iter().product();
    let inner_size: usize = cards[keep.len()..].iter().product();
    let total = out_size.saturating_mul(inner_size);
    if total > MAX_FACTOR_ENTRIES {
        return Err(Error::Guard(format!(
            "intermediate factor with {total} entries exceeds {MAX_FACTOR_ENTRIES}"
        )));
    }
    // Per factor stride of every scope position.
    let strides: Vec<Vec<usize>> = factors
        .iter()
        .map(|f| {
            let mut local = vec![0usize; f.vars.len()];
            let mut s = 1;
            for i in (0..f.vars.len()).rev() {
                local[i] = s;
                s *= f.cards[i];
            }
            scope
                .iter()
                .map(|v| f.vars.iter().position(|x| x == v).map_or(0, |p| local[p]))
                .collect()
        })
        .collect();

    let mut table = Vec::with_capacity(out_size);
    let mut values = vec![0usize; scope.len()];
    for _ in 0..out_size {
        let mut acc = CompensatedSum::default();
        for _ in 0..inner_size {
            let mut p = 1.0;
            for (f, st) in factors.iter().zip(&strides) {
                let idx: usize = values.iter().zip(st).map(|(v, s)| v * s).sum();
                p *= f.table[idx];
                if p == 0.0 {
                    break;
                }
            }
            acc.add(p);
            increment(&mut values, &cards, keep.len());
        }
        table.push(acc.value());
        increment(&mut values[..keep.len()], &cards[..keep.len()], 0);
    }
    Ok(Factor {
        vars: keep.to_vec(),
        cards: cards[..keep.len()].to_vec(),
        table,
    })
}

/// Mixed-radix increment of `values[from..]` (last position fastest),
/// wrapping to zero.
fn increment(values: &mut [usize], cards: &[usize], from: usize) {
    for i in (from..values.len()).rev() {
        values[i] += 1;
        if values[i] < cards[i] {
            return;
        }
        values[i] = 0;
    }
}

/// Variable elimination over an unrolled network.
#[derive(Debug, Clone)]
pub struct ExactOracle<'a> {
    dbn: &'a UnrolledDbn,
}

impl<'a> ExactOracle<'a> {
    pub fn new(dbn: &'a UnrolledDbn) -> Self {
        ExactOracle { dbn }
    }

    pub fn dbn(&self) -> &UnrolledDbn {
        self.dbn
    }

    /// Unnormalized joint `p(query, evidence)` over `query` (in the given
    /// order), where `evidence` replaces the network's own evidence.
    pub fn joint_with(&self, query: &[NodeId], evidence: &BTreeMap<NodeId, usize>) -> Result<Factor> {
        // Nodes outside the ancestral closure of query and evidence sum to one.
        let mut relevant = BTreeSet::new();
        let mut stack: Vec<NodeId> = query.iter().chain(evidence.keys()).copied().collect();
        while let Some(v) = stack.pop() {
            if relevant.insert(v) {
                stack.extend(self.dbn.node(v).parents.iter().copied());
            }
        }
        let mut factors: Vec<Factor> = relevant
            .iter()
            .map(|&id| {
                let mut f = Factor::from_node(self.dbn, id);
                for (&var, &val) in evidence {
                    f.observe(var, val);
                }
                f
            })
            .collect();

        let keep: BTreeSet<NodeId> = query.iter().copied().collect();
        let mut pending: BTreeSet<NodeId> = relevant.difference(&keep).copied().collect();
        while !pending.is_empty() {
            // Greedy min-size elimination.
            let (&var, _) = pending
                .iter()
                .map(|v| (v, self.elimination_cost(&factors, *v)))
                .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)))
                .expect("non-empty");
            pending.remove(&var);
            let (touching, rest): (Vec<Factor>, Vec<Factor>) =
                factors.into_iter().partition(|f| f.vars.contains(&var));
            let mut scope: Vec<NodeId> = Vec::new();
            for f in &touching {
                for &v in &f.vars {
                    if v != var && !scope.contains(&v) {
                        scope.push(v);
                    }
                }
            }
            let refs: Vec<&Factor> = touching.iter().collect();
            let reduced = multiply_and_marginalize(&refs, &scope)?;
            factors = rest;
            factors.push(reduced);
        }
        let refs: Vec<&Factor> = factors.iter().collect();
        if refs.is_empty() {
            return Ok(Factor {
                vars: vec![],
                cards: vec![],
                table: vec![1.0],
            });
        }
        multiply_and_marginalize(&refs, query)
    }

    fn elimination_cost(&self, factors: &[Factor], var: NodeId) -> usize {
        let mut scope = BTreeSet::new();
        for f in factors.iter().filter(|f| f.vars.contains(&var)) {
            scope.extend(f.vars.iter().copied());
        }
        scope
            .iter()
            .map(|&v| self.dbn.node(v).card)
            .try_fold(1usize, |acc, c| acc.checked_mul(c))
            .unwrap_or(usize::MAX)
    }

    /// Joint of `query` with the network's evidence.
    pub fn joint(&self, query: &[NodeId]) -> Result<Factor> {
        self.joint_with(query, &self.dbn.evidence)
    }

    /// Probability of the network's evidence.
    pub fn evidence_probability(&self) -> Result<f64> {
        Ok(self.joint(&[])?.table[0])
    }

    /// Probability of an arbitrary evidence set.
    pub fn probability_of(&self, evidence: &BTreeMap<NodeId, usize>) -> Result<f64> {
        Ok(self.joint_with(&[], evidence)?.table[0])
    }

    /// Posterior distribution of one node given the network's evidence.
    pub fn posterior(&self, id: NodeId) -> Result<Vec<f64>> {
        let f = self.joint(&[id])?;
        normalize(f.table, || self.dbn.node(id).label.clone())
    }

    /// Posterior joint over several nodes (normalized, `query` order).
    pub fn posterior_joint(&self, query: &[NodeId]) -> Result<Factor> {
        let mut f = self.joint(query)?;
        f.table = normalize(f.table, || "query".into())?;
        Ok(f)
    }

    /// Start-conditioned prior marginal, ignoring all non-start evidence.
    pub fn prior_joint(&self, query: &[NodeId]) -> Result<Factor> {
        let start = self.dbn.start_evidence_only();
        let mut f = self.joint_with(query, &start.evidence)?;
        f.table = normalize(f.table, || "prior".into())?;
        Ok(f)
    }

    /// Start-conditioned prior `p(c_t = 1)`.
    pub fn prior_cumulative(&self, t: usize) -> Result<f64> {
        Ok(self.prior_joint(&[self.dbn.cumulative_node(t)])?.table[1])
    }

    /// Start-conditioned prior `p(r_t = 1)`.
    pub fn prior_reward(&self, t: usize) -> Result<f64> {
        Ok(self.prior_joint(&[self.dbn.reward_node(t)])?.table[1])
    }

    /// Expected raw return over the lookahead under the installed policy,
    /// from prior joint marginals of each reward factor's parents.
    pub fn expected_raw_return(&self, mdp: &FactoredMdp) -> Result<f64> {
        let mut acc = CompensatedSum::default();
        for t in 1..=self.dbn.lookahead {
            for (i, factor) in mdp.rewards.iter().enumerate() {
                let node = if self.dbn.num_factors == 1 {
                    self.dbn.reward_node(t)
                } else {
                    self.dbn.partial_nodes(t)[i]
                };
                let parents = &self.dbn.node(node).parents;
                let joint = self.prior_joint(parents)?;
                for (p, v) in joint.table.iter().zip(&factor.values) {
                    acc.add(p * v);
                }
            }
        }
        Ok(acc.value())
    }

    /// All summary quantities of the network.
    pub fn summarize(&self, mdp: &FactoredMdp) -> Result<ExactSummary> {
        let dbn = self.dbn;
        let evidence_prob = self.evidence_probability()?;
        let log_evidence = evidence_prob.ln();
        let expected_ct = self.prior_cumulative(dbn.lookahead)?;
        let node_marginals = (0..dbn.len())
            .map(|id| match dbn.evidence.get(&id) {
                Some(&v) => {
                    let mut d = vec![0.0; dbn.node(id).card];
                    d[v] = 1.0;
                    Ok(d)
                }
                None => self.posterior(id),
            })
            .collect::<Result<Vec<_>>>()?;
        let action_posterior = (0..dbn.lookahead)
            .map(|t| {
                (0..dbn.num_action_vars())
                    .map(|l| node_marginals[dbn.action_node(t, l)].clone())
                    .collect()
            })
            .collect();
        Ok(ExactSummary {
            expected_raw_return: self.expected_raw_return(mdp)?,
            expected_ct,
            log_evidence,
            action_posterior,
            node_marginals,
            elbo_upper_bound: log_evidence,
        })
    }
}

fn normalize(table: Vec<f64>, what: impl FnOnce() -> String) -> Result<Vec<f64>> {
    let z = compensated_sum(table.iter().copied());
    if z <= 0.0 || !z.is_finite() {
        return Err(Error::Inference {
            node: what(),
            message: "evidence has probability zero".into(),
        });
    }
    Ok(table.into_iter().map(|x| x / z).collect())
}

/// Exact quantities of an unrolled network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactSummary {
    pub expected_raw_return: f64,
    /// Start-conditioned prior `p(c_T = 1)`.
    pub expected_ct: f64,
    /// `log p(evidence)`.
    pub log_evidence: f64,
    /// `[t][l]` posterior distribution of each action variable.
    pub action_posterior: Vec<Vec<Vec<f64>>>,
    /// Posterior distribution of every node (point masses on evidence).
    pub node_marginals: Vec<Vec<f64>>,
    pub elbo_upper_bound: f64,
}

/// Unrolls `mdp` with policy `theta` and summarizes it exactly.
pub fn exact_summary(
    mdp: &FactoredMdp,
    start: &StartState,
    theta: &PolicyParams,
    mode: EvidenceMode,
) -> Result<ExactSummary> {
    let dbn = unroll(mdp, start, theta.steps(), mode)?.with_policy(theta);
    ExactOracle::new(&dbn).summarize(mdp)
}

/// Largest state space for direct trajectory propagation.
pub const MAX_STATE_BITS: usize = 16;

/// Expected raw return of an open-loop stochastic policy, computed by
/// propagating the exact joint state distribution of the MDP.
pub fn policy_return(mdp: &FactoredMdp, start: &StartState, theta: &PolicyParams) -> Result<f64> {
    Ok(policy_step_returns(mdp, start, theta)?.iter().sum())
}

/// Expected raw reward at each step of an open-loop stochastic policy.
pub fn policy_step_returns(mdp: &FactoredMdp, start: &StartState, theta: &PolicyParams) -> Result<Vec<f64>> {
    let m = mdp.num_state_vars();
    if m > MAX_STATE_BITS {
        return Err(Error::Guard(format!("{m} state variables exceed {MAX_STATE_BITS}")));
    }
    let n_states = 1usize << m;
    let state_of = |i: usize| -> Vec<usize> { (0..m).map(|j| (i >> (m - 1 - j)) & 1).collect() };
    let probs = start.probs();
    let mut dist: Vec<f64> = (0..n_states)
        .map(|i| {
            state_of(i)
                .iter()
                .zip(&probs)
                .map(|(&v, &p)| if v == 1 { p } else { 1.0 - p })
                .product()
        })
        .collect();
    let actions = mdp.all_actions();
    let mut out = Vec::with_capacity(theta.steps());
    for t in 0..theta.steps() {
        let weights: Vec<f64> = actions
            .iter()
            .map(|a| a.iter().enumerate().map(|(l, &v)| theta.prob(t, l, v)).product())
            .collect();
        let mut reward = CompensatedSum::default();
        let mut next = vec![CompensatedSum::default(); n_states];
        for (si, &ps) in dist.iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            let s = state_of(si);
            for (a, &w) in actions.iter().zip(&weights) {
                let p = ps * w;
                if p == 0.0 {
                    continue;
                }
                reward.add(p * mdp.reward(&s, a));
                for (ni, slot) in next.iter_mut().enumerate() {
                    let ns = state_of(ni);
                    let mut q = p;
                    for &j in mdp.synchronic_topological_order() {
                        let p1 = mdp.transition_prob(j, &s, a, &ns);
                        q *= if ns[j] == 1 { p1 } else { 1.0 - p1 };
                        if q == 0.0 {
                            break;
                        }
                    }
                    if q != 0.0 {
                        slot.add(q);
                    }
                }
            }
        }
        out.push(reward.value());
        dist = next.iter().map(CompensatedSum::value).collect();
    }
    Ok(out)
}

/// Expected raw return of a concrete open-loop plan.
pub fn plan_return(mdp: &FactoredMdp, start: &StartState, plan: &[Action]) -> Result<f64> {
    policy_return(mdp, start, &PolicyParams::from_plan(&mdp.action_cards(), plan))
}

/// Largest number of open-loop plans [`all_plan_returns`] will enumerate.
pub const MAX_PLANS: usize = 1 << 14;

/// Every open-loop plan of length `steps` with its exact expected return,
/// in mixed-radix order (the all-no-op plan first).
pub fn all_plan_returns(mdp: &FactoredMdp, start: &StartState, steps: usize) -> Result<Vec<(Vec<Action>, f64)>> {
    let actions = mdp.all_actions();
    let count = actions
        .len()
        .checked_pow(steps as u32)
        .filter(|&c| c <= MAX_PLANS)
        .ok_or_else(|| Error::Guard(format!("{}^{steps} plans exceed {MAX_PLANS}", actions.len())))?;
    let cards = vec![actions.len(); steps];
    (0..count)
        .map(|i| {
            let plan: Vec<Action> = config_values(&cards, i).into_iter().map(|k| actions[k].clone()).collect();
            let v = plan_return(mdp, start, &plan)?;
            Ok((plan, v))
        })
        .collect()
}

/// The best open-loop plan (ties toward the earliest in mixed-radix order).
pub fn best_plan(mdp: &FactoredMdp, start: &StartState, steps: usize) -> Result<(Vec<Action>, f64)> {
    let all = all_plan_returns(mdp, start, steps)?;
    let mut best = 0;
    for (i, (_, v)) in all.iter().enumerate() {
        if *v > all[best].1 + 1e-12 {
            best = i;
        }
    }
    Ok(all[best].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionVar, Cpt, ParentRef, RewardFactor, StateVar};

    fn toy() -> FactoredMdp {
        FactoredMdp::new(
            "toy",
            vec![StateVar { name: "x".into() }, StateVar { name: "y".into() }],
            vec![ActionVar::binary("a")],
            vec![
                Cpt {
                    parents: vec![ParentRef::State(0), ParentRef::Action(0)],
                    probs: vec![0.1, 0.7, 0.6, 0.9],
                },
                Cpt {
                    parents: vec![ParentRef::State(1), ParentRef::Next(0)],
                    probs: vec![0.2, 0.5, 0.4, 0.95],
                },
            ],
            vec![
                RewardFactor {
                    name: "rx".into(),
                    parents: vec![ParentRef::State(0)],
                    values: vec![0.0, 2.0],
                },
                RewardFactor {
                    name: "ry".into(),
                    parents: vec![ParentRef::State(1), ParentRef::Action(0)],
                    values: vec![0.0, -1.0, 3.0, 1.0],
                },
            ],
            vec![0.3, 0.6],
            3,
        )
        .unwrap()
    }

    /// Brute-force joint over every node assignment.
    fn brute_force(dbn: &UnrolledDbn) -> Vec<(Vec<usize>, f64)> {
        let cards: Vec<usize> = dbn.nodes.iter().map(|n| n.card).collect();
        let total: usize = cards.iter().product();
        (0..total)
            .map(|i| {
                let x = config_values(&cards, i);
                let mut p = 1.0;
                for (id, n) in dbn.nodes.iter().enumerate() {
                    let pv: Vec<usize> = n.parents.iter().map(|&q| x[q]).collect();
                    let cfg = config_index(&dbn.parent_cards(id), &pv);
                    p *= n.prob(cfg, x[id]);
                }
                (x, p)
            })
            .collect()
    }

    #[test]
    fn elimination_matches_brute_force() {
        let mdp = toy();
        let dbn = unroll(&mdp, &StartState::from_mdp(&mdp), 2, EvidenceMode::Terminal).unwrap();
        let joint = brute_force(&dbn);
        let consistent = |x: &Vec<usize>| dbn.evidence.iter().all(|(&k, &v)| x[k] == v);
        let z: f64 = joint.iter().filter(|(x, _)| consistent(x)).map(|(_, p)| p).sum();
        let oracle = ExactOracle::new(&dbn);
        assert!((oracle.evidence_probability().unwrap() - z).abs() < 1e-12);
        for id in 0..dbn.len() {
            let p1: f64 = joint
                .iter()
                .filter(|(x, _)| consistent(x) && x[id] == 1)
                .map(|(_, p)| p)
                .sum();
            let post = oracle.posterior(id).unwrap();
            assert!((post[1] - p1 / z).abs() < 1e-12, "node {}", dbn.node(id).label);
        }
    }

    #[test]
    fn raw_return_agrees_with_trajectory_propagation() {
        let mdp = toy();
        let start = StartState::from_mdp(&mdp);
        let theta = PolicyParams::uniform(&mdp.action_cards(), 3);
        let s = exact_summary(&mdp, &start, &theta, EvidenceMode::Terminal).unwrap();
        let direct = policy_return(&mdp, &start, &theta).unwrap();
        assert!((s.expected_raw_return - direct).abs() < 1e-12);
        let dbn = unroll(&mdp, &start, 3, EvidenceMode::Terminal).unwrap();
        assert!((dbn.raw_expected_reward(s.expected_ct).value - direct).abs() < 1e-12);
    }

    #[test]
    fn single_rewarding_sequence_gets_all_posterior_mass() {
        // x' = a, reward only when x = 1 at the last step: needs a_0 = 1, and
        // with T = 1 the reward depends on s_0 only, so use T = 2 where only
        // a_0 matters for r_2.
        let mdp = FactoredMdp::new(
            "det",
            vec![StateVar { name: "x".into() }],
            vec![ActionVar::binary("a")],
            vec![Cpt {
                parents: vec![ParentRef::Action(0)],
                probs: vec![0.0, 1.0],
            }],
            vec![RewardFactor {
                name: "r".into(),
                parents: vec![ParentRef::State(0), ParentRef::Action(0)],
                values: vec![0.0, 0.0, 0.0, 1.0],
            }],
            vec![0.0],
            2,
        )
        .unwrap();
        let theta = PolicyParams::uniform(&[2], 2);
        let s = exact_summary(&mdp, &StartState::Concrete(vec![0]), &theta, EvidenceMode::Terminal).unwrap();
        assert!((s.action_posterior[0][0][1] - 1.0).abs() < 1e-12);
        assert!((s.action_posterior[1][0][1] - 1.0).abs() < 1e-12);
        assert!(s.log_evidence <= 0.0);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1.0, 1e-16, 1e-16, -1.0];
        assert_eq!(compensated_sum(xs), 2e-16);
    }

    #[test]
    fn best_plan_prefers_earliest_on_ties() {
        let mdp = toy();
        let all = all_plan_returns(&mdp, &StartState::from_mdp(&mdp), 2).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all[0].0, vec![vec![0], vec![0]]);
    }
}
