//! Loopy belief propagation on the factor graph of an unrolled network, and
//! the backward planner that reads action posteriors off it.

use serde::{Deserialize, Serialize};

use crate::dbn::{unroll, EvidenceMode, NodeId, UnrolledDbn};
use crate::error::{Error, Result};
use crate::model::{FactoredMdp, State, StartState};
use crate::policy::{argmax_low, ActionAssignment, Diagnostics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Every variable-to-factor message from the previous round, then every
    /// factor-to-variable message from those.
    Parallel,
    /// Factors in topological order of their child, then in reverse.
    SequentialTopological,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpConfig {
    pub schedule: Schedule,
    pub max_iterations: usize,
    /// Geometric damping weight on the previous message, in `[0, 1)`.
    pub damping: f64,
    /// Convergence threshold on the largest change of any normalized message.
    pub tolerance: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            schedule: Schedule::Parallel,
            max_iterations: 100,
            damping: 0.0,
            tolerance: 1e-6,
        }
    }
}

impl BpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Domain(format!("damping {} outside [0, 1)", self.damping)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Domain("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_delta: f64,
}

/// A factor: conditional table or evidence clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFactor {
    pub vars: Vec<NodeId>,
    pub cards: Vec<usize>,
    pub table: Vec<f64>,
    /// `Some(node)` when this is the unary clamp of an observed node.
    pub clamp: Option<NodeId>,
}

/// Bipartite variable/factor graph with log-space messages in both
/// directions. Messages are max-normalized (largest entry 0).
#[derive(Debug, Clone)]
pub struct FactorGraph {
    pub cards: Vec<usize>,
    pub labels: Vec<String>,
    pub factors: Vec<GraphFactor>,
    /// `(factor, position)` for every edge of each variable.
    pub var_edges: Vec<Vec<(usize, usize)>>,
    /// Indexed `[factor][position]`.
    to_var: Vec<Vec<Vec<f64>>>,
    to_factor: Vec<Vec<Vec<f64>>>,
    /// Factor processing order for the sequential schedule.
    topo: Vec<usize>,
}

/// Builds the factor graph of `dbn`: one factor per conditional table and
/// one unary clamp per observed node.
pub fn build_factor_graph(dbn: &UnrolledDbn) -> FactorGraph {
    let mut factors: Vec<GraphFactor> = (0..dbn.len())
        .map(|id| {
            let node = dbn.node(id);
            let mut vars = node.parents.clone();
            vars.push(id);
            GraphFactor {
                cards: vars.iter().map(|&v| dbn.node(v).card).collect(),
                vars,
                table: node.cpt.clone(),
                clamp: None,
            }
        })
        .collect();
    for (&id, &value) in &dbn.evidence {
        let card = dbn.node(id).card;
        let mut table = vec![0.0; card];
        table[value] = 1.0;
        factors.push(GraphFactor {
            vars: vec![id],
            cards: vec![card],
            table,
            clamp: Some(id),
        });
    }
    FactorGraph::new(
        dbn.nodes.iter().map(|n| n.card).collect(),
        dbn.nodes.iter().map(|n| n.label.clone()).collect(),
        factors,
    )
}

impl FactorGraph {
    /// Graph over explicit factors; the sequential order is the factor order.
    pub fn new(cards: Vec<usize>, labels: Vec<String>, factors: Vec<GraphFactor>) -> Self {
        let mut var_edges = vec![Vec::new(); cards.len()];
        for (f, factor) in factors.iter().enumerate() {
            for (pos, &v) in factor.vars.iter().enumerate() {
                var_edges[v].push((f, pos));
            }
        }
        let uniform = |f: &GraphFactor| f.vars.iter().map(|&v| vec![0.0; cards[v]]).collect::<Vec<_>>();
        let to_var = factors.iter().map(uniform).collect();
        let to_factor = factors.iter().map(uniform).collect();
        // Clamps go right after the factor of the node they observe so that
        // the forward sweep sees the evidence before the node's children.
        let mut topo: Vec<usize> = Vec::with_capacity(factors.len());
        let mut clamps: Vec<Vec<usize>> = vec![Vec::new(); cards.len()];
        for (f, factor) in factors.iter().enumerate() {
            if let Some(v) = factor.clamp {
                clamps[v].push(f);
            }
        }
        for (f, factor) in factors.iter().enumerate() {
            if factor.clamp.is_none() {
                topo.push(f);
                if let Some(&child) = factor.vars.last() {
                    topo.append(&mut clamps[child]);
                }
            }
        }
        topo.extend(clamps.into_iter().flatten());
        FactorGraph {
            cards,
            labels,
            factors,
            var_edges,
            to_var,
            to_factor,
            topo,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.cards.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn num_clamps(&self) -> usize {
        self.factors.iter().filter(|f| f.clamp.is_some()).count()
    }

    pub fn num_edges(&self) -> usize {
        self.factors.iter().map(|f| f.vars.len()).sum()
    }

    /// Whether the bipartite graph has no cycles.
    pub fn is_forest(&self) -> bool {
        // A graph is a forest iff edges = vertices - components.
        let n = self.num_vars() + self.num_factors();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (f, factor) in self.factors.iter().enumerate() {
            for &v in &factor.vars {
                let (a, b) = (find(&mut parent, v), find(&mut parent, self.num_vars() + f));
                if a == b {
                    return false;
                }
                parent[a] = b;
            }
        }
        true
    }

    /// Resets every message to uniform.
    pub fn reset(&mut self) {
        for msgs in self.to_var.iter_mut().chain(self.to_factor.iter_mut()) {
            for m in msgs.iter_mut() {
                m.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn var_to_factor(&self, f: usize, pos: usize) -> Vec<f64> {
        let v = self.factors[f].vars[pos];
        let mut out = vec![0.0; self.cards[v]];
        for &(g, gpos) in &self.var_edges[v] {
            if (g, gpos) == (f, pos) {
                continue;
            }
            for (o, m) in out.iter_mut().zip(&self.to_var[g][gpos]) {
                *o += m;
            }
        }
        max_normalize(&mut out);
        out
    }

    fn factor_to_var(&self, f: usize, pos: usize) -> Vec<f64> {
        let factor = &self.factors[f];
        let incoming: Vec<Vec<f64>> = self.to_factor[f]
            .iter()
            .map(|m| m.iter().map(|x| x.exp()).collect())
            .collect();
        let mut acc = vec![0.0; factor.cards[pos]];
        let mut values = vec![0usize; factor.vars.len()];
        for &entry in &factor.table {
            if entry != 0.0 {
                let mut p = entry;
                for (i, &val) in values.iter().enumerate() {
                    if i != pos {
                        p *= incoming[i][val];
                    }
                }
                acc[values[pos]] += p;
            }
            for i in (0..values.len()).rev() {
                values[i] += 1;
                if values[i] < factor.cards[i] {
                    break;
                }
                values[i] = 0;
            }
        }
        let mut out: Vec<f64> = acc.iter().map(|x| x.ln()).collect();
        max_normalize(&mut out);
        out
    }

    fn check(&self, msg: &[f64], v: NodeId) -> Result<()> {
        if msg.iter().all(|x| *x == f64::NEG_INFINITY) || msg.iter().any(|x| x.is_nan()) {
            return Err(Error::Inference {
                node: self.labels[v].clone(),
                message: "all-zero message (contradictory evidence)".into(),
            });
        }
        Ok(())
    }

    fn set(slot: &mut Vec<f64>, new: Vec<f64>, damping: f64) -> f64 {
        let new = if damping > 0.0 {
            let mut mixed: Vec<f64> = slot
                .iter()
                .zip(&new)
                .map(|(o, n)| damping * o + (1.0 - damping) * n)
                .collect();
            max_normalize(&mut mixed);
            mixed
        } else {
            new
        };
        let delta = prob_delta(slot, &new);
        *slot = new;
        delta
    }

    /// One round of message updates; returns the largest change of any
    /// normalized message.
    pub fn iterate(&mut self, cfg: &BpConfig) -> Result<f64> {
        let mut delta: f64 = 0.0;
        match cfg.schedule {
            Schedule::Parallel => {
                let mut new_to_factor = self.to_factor.clone();
                for (f, factor) in self.factors.iter().enumerate() {
                    for pos in 0..factor.vars.len() {
                        new_to_factor[f][pos] = self.var_to_factor(f, pos);
                    }
                }
                for f in 0..self.factors.len() {
                    for pos in 0..self.factors[f].vars.len() {
                        let new = std::mem::take(&mut new_to_factor[f][pos]);
                        self.check(&new, self.factors[f].vars[pos])?;
                        delta = delta.max(Self::set(&mut self.to_factor[f][pos], new, cfg.damping));
                    }
                }
                let mut new_to_var = Vec::with_capacity(self.factors.len());
                for (f, factor) in self.factors.iter().enumerate() {
                    new_to_var.push(
                        (0..factor.vars.len())
                            .map(|pos| self.factor_to_var(f, pos))
                            .collect::<Vec<_>>(),
                    );
                }
                for (f, msgs) in new_to_var.into_iter().enumerate() {
                    for (pos, new) in msgs.into_iter().enumerate() {
                        self.check(&new, self.factors[f].vars[pos])?;
                        delta = delta.max(Self::set(&mut self.to_var[f][pos], new, cfg.damping));
                    }
                }
            }
            Schedule::SequentialTopological => {
                let order: Vec<usize> = self.topo.iter().chain(self.topo.iter().rev()).copied().collect();
                for f in order {
                    for pos in 0..self.factors[f].vars.len() {
                        let new = self.var_to_factor(f, pos);
                        self.check(&new, self.factors[f].vars[pos])?;
                        delta = delta.max(Self::set(&mut self.to_factor[f][pos], new, cfg.damping));
                    }
                    for pos in 0..self.factors[f].vars.len() {
                        let new = self.factor_to_var(f, pos);
                        self.check(&new, self.factors[f].vars[pos])?;
                        delta = delta.max(Self::set(&mut self.to_var[f][pos], new, cfg.damping));
                    }
                }
            }
        }
        Ok(delta)
    }

    /// Normalized belief of every variable.
    pub fn marginals(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.num_vars())
            .map(|v| {
                let mut log = vec![0.0; self.cards[v]];
                for &(f, pos) in &self.var_edges[v] {
                    for (l, m) in log.iter_mut().zip(&self.to_var[f][pos]) {
                        *l += m;
                    }
                }
                self.check(&log, v)?;
                Ok(softmax(&log))
            })
            .collect()
    }
}

fn max_normalize(log: &mut [f64]) {
    let max = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_finite() {
        log.iter_mut().for_each(|x| *x -= max);
    }
}

fn softmax(log: &[f64]) -> Vec<f64> {
    let max = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn prob_delta(old: &[f64], new: &[f64]) -> f64 {
    let (a, b) = (softmax(old), softmax(new));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Marginals of every variable and the convergence report.
#[derive(Debug, Clone, PartialEq)]
pub struct BpResult {
    pub marginals: Vec<Vec<f64>>,
    pub report: ConvergenceReport,
}

/// Runs loopy BP from uniform messages until convergence or the iteration
/// cap. Non-convergence is reported, not an error.
pub fn propagate(fg: &mut FactorGraph, cfg: &BpConfig) -> Result<BpResult> {
    cfg.validate()?;
    fg.reset();
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        delta = fg.iterate(cfg)?;
        iterations += 1;
        if delta <= cfg.tolerance {
            break;
        }
    }
    Ok(BpResult {
        marginals: fg.marginals()?,
        report: ConvergenceReport {
            iterations,
            converged: delta <= cfg.tolerance,
            final_delta: delta,
        },
    })
}

/// BP marginals of every node of `dbn`.
pub fn dbn_marginals(dbn: &UnrolledDbn, cfg: &BpConfig) -> Result<BpResult> {
    let mut fg = build_factor_graph(dbn);
    propagate(&mut fg, cfg)
}

/// `p(c_T = 1)` from a run without downstream evidence (start evidence kept).
pub fn forward_value(dbn: &UnrolledDbn, cfg: &BpConfig) -> Result<f64> {
    let fwd = dbn.start_evidence_only();
    Ok(dbn_marginals(&fwd, cfg)?.marginals[fwd.terminal_node()][1])
}

/// Backward planning: condition on success under a uniform policy and take
/// the per-variable argmax of the action marginals (ties toward 0).
pub fn backward_bp_plan(mdp: &FactoredMdp, start: &State, lookahead: usize, cfg: &BpConfig) -> Result<ActionAssignment> {
    let dbn = unroll(mdp, &StartState::Concrete(start.clone()), lookahead, EvidenceMode::Terminal)?;
    let result = dbn_marginals(&dbn, cfg)?;
    let sequence: Vec<Vec<usize>> = (0..lookahead)
        .map(|t| {
            (0..dbn.num_action_vars())
                .map(|l| argmax_low(&result.marginals[dbn.action_node(t, l)]))
                .collect()
        })
        .collect();
    let score = (0..dbn.num_action_vars())
        .map(|l| result.marginals[dbn.action_node(0, l)][sequence[0][l]])
        .product();
    Ok(ActionAssignment {
        sequence,
        diagnostics: Diagnostics {
            iterations: result.report.iterations,
            score,
            converged: result.report.converged,
            trace: vec![result.report.final_delta],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::builtin::{chain_reward, random_chain};
    use crate::exact::ExactOracle;

    #[test]
    fn minimal_graph_counts() {
        let mdp = chain_reward(1).unwrap();
        let dbn = unroll(&mdp, &StartState::from_mdp(&mdp), 1, EvidenceMode::Terminal).unwrap();
        let fg = build_factor_graph(&dbn);
        assert_eq!(fg.num_factors() - fg.num_clamps(), 4);
        assert_eq!(fg.num_clamps(), 1);
        assert!(fg.is_forest());
    }

    #[test]
    fn tree_marginals_are_exact() {
        for seed in 0..5 {
            let mdp = random_chain(3, seed);
            let dbn = unroll(&mdp, &StartState::from_mdp(&mdp), 5, EvidenceMode::Terminal).unwrap();
            assert!(build_factor_graph(&dbn).is_forest());
            for schedule in [Schedule::Parallel, Schedule::SequentialTopological] {
                let cfg = BpConfig {
                    schedule,
                    tolerance: 1e-13,
                    ..BpConfig::default()
                };
                let res = dbn_marginals(&dbn, &cfg).unwrap();
                assert!(res.report.converged);
                let oracle = ExactOracle::new(&dbn);
                for id in dbn.latent_nodes() {
                    let exact = oracle.posterior(id).unwrap();
                    assert!((res.marginals[id][1] - exact[1]).abs() < 1e-9, "{}", dbn.node(id).label);
                }
            }
        }
    }

    #[test]
    fn contradictory_evidence_is_an_error() {
        let mdp = chain_reward(1).unwrap();
        let mut dbn = unroll(&mdp, &StartState::Concrete(vec![0]), 1, EvidenceMode::Terminal).unwrap();
        // s_0 = 0 makes r_1 = 0 certain, so c_1 = 1 is impossible.
        dbn.evidence.insert(dbn.reward_node(1), 1);
        let err = dbn_marginals(&dbn, &BpConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Inference { .. }), "{err:?}");
    }

    #[test]
    fn bad_damping_is_rejected() {
        let cfg = BpConfig {
            damping: 1.0,
            ..BpConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
