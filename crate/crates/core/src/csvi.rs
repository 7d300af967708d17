//! Collapsed variational inference: a factorized posterior over the actions
//! only, with states, rewards and the cumulative chain summed out by nested
//! Monte Carlo.
//!
//! Updating action variable `(t, l)` sets
//! `q(a = v) ∝ θ(v) · exp((1/M1) Σ_i log p̂_i(v))`, where each `p̂_i` is a
//! smoothed success frequency over `M2` trajectories simulated with the
//! other actions drawn from `q` and `a` clamped to `v`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dbn::{unroll, EvidenceMode, NodeId, NodeKind, UnrolledDbn};
use crate::error::{Error, Result};
use crate::mfvi::{clamped_softmax, EPSILON};
use crate::model::{FactoredMdp, StartState, State};
use crate::policy::{ActionAssignment, Diagnostics, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsviConfig {
    /// Action sequences drawn per estimate.
    pub m1: usize,
    /// Trajectories simulated per action sequence.
    pub m2: usize,
    pub max_sweeps: usize,
    /// Additive smoothing of the success frequency.
    pub alpha: f64,
    pub stop_tol: f64,
    pub seed: u64,
}

impl Default for CsviConfig {
    fn default() -> Self {
        CsviConfig {
            m1: 20,
            m2: 50,
            max_sweeps: 10,
            alpha: 0.5,
            stop_tol: 0.1,
            seed: 0,
        }
    }
}

impl CsviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m1 == 0 || self.m2 == 0 || self.max_sweeps == 0 {
            return Err(Error::Domain("m1, m2 and max_sweeps must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !(self.stop_tol > 0.0) {
            return Err(Error::Domain("alpha and stop_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `θ ← q` after every sweep.
    Forward,
    /// `θ` stays uniform.
    Backward,
}

/// An action variable `(t, l)` clamped to `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub t: usize,
    pub l: usize,
    pub value: usize,
}

/// Ancestral sampler of the unrolled network for fixed actions.
///
/// Under terminal evidence a trajectory scores 1 when it ends with
/// `c_T = 1`. Under exponentiated evidence the reward block of each step is
/// summed out exactly and the trajectory scores the product of the evidence
/// probabilities, which has the same expectation as the all-evidence
/// indicator with far less variance.
pub struct TrajectorySampler<'a> {
    dbn: &'a UnrolledDbn,
    strides: Vec<Vec<usize>>,
    action_slot: Vec<Option<(usize, usize)>>,
}

impl<'a> TrajectorySampler<'a> {
    pub fn new(dbn: &'a UnrolledDbn) -> Self {
        let strides = (0..dbn.len())
            .map(|id| {
                let cards = dbn.parent_cards(id);
                let mut s = vec![1; cards.len()];
                for i in (0..cards.len().saturating_sub(1)).rev() {
                    s[i] = s[i + 1] * cards[i + 1];
                }
                s
            })
            .collect();
        let action_slot = dbn
            .nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Action { var, t } => Some((t, var)),
                _ => None,
            })
            .collect();
        TrajectorySampler {
            dbn,
            strides,
            action_slot,
        }
    }

    fn config(&self, id: NodeId, vals: &[usize]) -> usize {
        self.dbn.node(id).parents.iter().zip(&self.strides[id]).map(|(&p, s)| vals[p] * s).sum()
    }

    fn draw(&self, id: NodeId, config: usize, rng: &mut impl Rng) -> usize {
        let node = self.dbn.node(id);
        let row = &node.cpt[config * node.card..(config + 1) * node.card];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (v, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return v;
            }
        }
        // Rounding: fall back to the last value with positive mass.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Probability that a reward-block node is 1 given sampled slice
    /// variables and the exact marginals of earlier block nodes.
    fn block_marginal(&self, id: NodeId, vals: &[usize], marg: &[f64], block: &[bool]) -> f64 {
        let node = self.dbn.node(id);
        let mut total = 0.0;
        for config in 0..node.num_configs() {
            let mut w = 1.0;
            let mut rest = config;
            for (&p, &s) in node.parents.iter().zip(&self.strides[id]) {
                let v = rest / s;
                rest %= s;
                w *= if block[p] {
                    if v == 1 {
                        marg[p]
                    } else {
                        1.0 - marg[p]
                    }
                } else if vals[p] == v {
                    1.0
                } else {
                    0.0
                };
                if w == 0.0 {
                    break;
                }
            }
            if w != 0.0 {
                total += w * node.prob(config, 1);
            }
        }
        total
    }

    /// Score of one trajectory under `actions[t][l]`. `vals`, `marg` and
    /// `block` are scratch buffers of the network's length.
    pub fn sample(&self, actions: &[State], rng: &mut impl Rng, scratch: &mut Scratch) -> f64 {
        let dbn = self.dbn;
        let Scratch { vals, marg, block } = scratch;
        let exponentiated = dbn.mode == EvidenceMode::Exponentiated;
        let mut weight = 1.0;
        for id in 0..dbn.len() {
            let kind = dbn.node(id).kind;
            if let Some((t, l)) = self.action_slot[id] {
                vals[id] = actions[t][l];
                continue;
            }
            if exponentiated {
                match kind {
                    NodeKind::PartialReward { .. } | NodeKind::Collect { .. } => {
                        block[id] = true;
                        marg[id] = self.block_marginal(id, vals, marg, block);
                        continue;
                    }
                    NodeKind::Reward { .. } => {
                        let p1 = self.block_marginal(id, vals, marg, block);
                        let ev = dbn.evidence.get(&id).copied().unwrap_or(1);
                        weight *= if ev == 1 { p1 } else { 1.0 - p1 };
                        vals[id] = ev;
                        continue;
                    }
                    _ => {}
                }
                if let Some(&ev) = dbn.evidence.get(&id) {
                    weight *= dbn.node(id).prob(self.config(id, vals), ev);
                    vals[id] = ev;
                    continue;
                }
            }
            let config = self.config(id, vals);
            vals[id] = self.draw(id, config, rng);
        }
        if exponentiated {
            weight
        } else {
            f64::from(u8::from(vals[dbn.terminal_node()] == 1))
        }
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            vals: vec![0; self.dbn.len()],
            marg: vec![0.0; self.dbn.len()],
            block: vec![false; self.dbn.len()],
        }
    }
}

pub struct Scratch {
    vals: Vec<usize>,
    marg: Vec<f64>,
    block: Vec<bool>,
}

fn draw_from(d: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (v, p) in d.iter().enumerate() {
        acc += p;
        if u < acc {
            return v;
        }
    }
    d.len() - 1
}

fn sample_actions(q: &PolicyParams, target: Option<Target>, rng: &mut impl Rng) -> Vec<State> {
    (0..q.steps())
        .map(|t| {
            (0..q.num_vars())
                .map(|l| match target {
                    Some(tg) if tg.t == t && tg.l == l => tg.value,
                    _ => draw_from(&q.dist(t, l), rng),
                })
                .collect()
        })
        .collect()
}

/// `(1/M1) Σ_i log p̂_i` with `p̂_i = (X_i + α) / (M2 + 2α)`, where `X_i`
/// sums the scores of `M2` trajectories under the `i`-th action sequence
/// drawn from `q` (with `target`, when given, clamped).
pub fn estimate_log_g(
    sampler: &TrajectorySampler,
    q: &PolicyParams,
    target: Option<Target>,
    cfg: &CsviConfig,
    rng: &mut impl Rng,
) -> f64 {
    let mut scratch = sampler.scratch();
    let denom = cfg.m2 as f64 + 2.0 * cfg.alpha;
    let mut total = 0.0;
    for _ in 0..cfg.m1 {
        let actions = sample_actions(q, target, rng);
        let x: f64 = (0..cfg.m2).map(|_| sampler.sample(&actions, rng, &mut scratch)).sum();
        total += ((x + cfg.alpha) / denom).ln();
    }
    total / cfg.m1 as f64
}

/// The generator for one variable update: a fixed stream per
/// `(sweep, t, l)`, shared by every value so the values are compared on
/// common random numbers.
pub fn update_rng(seed: u64, sweep: usize, t: usize, l: usize, lookahead: usize, num_vars: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sweep * lookahead + t) * num_vars.max(1) + l) as u64 + 1);
    rng
}

/// New distribution of action variable `(t, l)`.
pub fn csvi_update_action(
    sampler: &TrajectorySampler,
    theta: &PolicyParams,
    q: &PolicyParams,
    t: usize,
    l: usize,
    cfg: &CsviConfig,
    rng: &ChaCha8Rng,
) -> Vec<f64> {
    let card = q.cards()[l];
    let u: Vec<f64> = (0..card)
        .map(|value| {
            let mut r = rng.clone();
            let g = estimate_log_g(sampler, q, Some(Target { t, l, value }), cfg, &mut r);
            theta.prob(t, l, value).max(EPSILON).ln() + g
        })
        .collect();
    clamped_softmax(&u)
}

/// Full output of a planning call.
#[derive(Debug, Clone)]
pub struct CsviRun {
    pub assignment: ActionAssignment,
    pub q: PolicyParams,
    pub theta: PolicyParams,
    /// `q` after every sweep.
    pub history: Vec<PolicyParams>,
}

fn max_change(a: &PolicyParams, b: &PolicyParams) -> f64 {
    a.values().iter().zip(b.values()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Runs the coordinate sweeps on an unrolled network.
pub fn csvi_on(dbn: &UnrolledDbn, cfg: &CsviConfig, direction: Direction) -> Result<CsviRun> {
    cfg.validate()?;
    let sampler = TrajectorySampler::new(dbn);
    let cards = dbn.action_cards();
    let (steps, nvars) = (dbn.lookahead, cards.len());
    let mut theta = PolicyParams::uniform(&cards, steps);
    let mut q = theta.clone();
    let mut history = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    let mut changes = Vec::new();
    for sweep in 0..cfg.max_sweeps {
        let before = q.clone();
        for t in 0..steps {
            for l in 0..nvars {
                let rng = update_rng(cfg.seed, sweep, t, l, steps, nvars);
                let d = csvi_update_action(&sampler, &theta, &q, t, l, cfg, &rng);
                q.set_dist(t, l, &d);
            }
        }
        sweeps += 1;
        history.push(q.clone());
        if direction == Direction::Forward {
            theta = q.clone();
        }
        let change = max_change(&q, &before);
        changes.push(change);
        if change < cfg.stop_tol {
            converged = true;
            break;
        }
    }
    let mut rng = update_rng(cfg.seed, cfg.max_sweeps, 0, 0, steps, nvars);
    let score = estimate_log_g(&sampler, &q, None, cfg, &mut rng);
    Ok(CsviRun {
        assignment: ActionAssignment {
            sequence: q.argmax_plan(),
            diagnostics: Diagnostics {
                iterations: sweeps,
                score,
                converged,
                trace: changes,
            },
        },
        q,
        theta,
        history,
    })
}

pub fn csvi(
    mdp: &FactoredMdp,
    start: &State,
    lookahead: usize,
    cfg: &CsviConfig,
    direction: Direction,
    mode: EvidenceMode,
) -> Result<CsviRun> {
    let dbn = unroll(mdp, &StartState::Concrete(start.clone()), lookahead, mode)?;
    csvi_on(&dbn, cfg, direction)
}

pub fn csvi_plan(
    mdp: &FactoredMdp,
    start: &State,
    lookahead: usize,
    cfg: &CsviConfig,
    direction: Direction,
    mode: EvidenceMode,
) -> Result<ActionAssignment> {
    Ok(csvi(mdp, start, lookahead, cfg, direction, mode)?.assignment)
}
