//! Forward planners on the compute graph: projected gradient ascent over the
//! policy parameters, and the one-step enumeration ("rollout") variant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{build_forward_graph, ComputeGraph};
use crate::dbn::{unroll, EvidenceMode};
use crate::error::{Error, Result};
use crate::model::{FactoredMdp, StartState, State};
use crate::policy::{argmax_low, ActionAssignment, Diagnostics, PolicyParams, TIE_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradConfig {
    pub max_updates: usize,
    /// Initial (and largest) step, taken along `g / |g|_∞`.
    pub step_size: f64,
    /// Backtracking gives up below this step.
    pub min_step: f64,
    /// Number of starting points: uniform, greedy corner, then random.
    pub restarts: usize,
    /// Sample the plan from `θ` instead of taking the argmax.
    pub sample_actions: bool,
}

impl Default for GradConfig {
    fn default() -> Self {
        GradConfig {
            max_updates: 500,
            step_size: 0.1,
            min_step: 1e-8,
            restarts: 3,
            sample_actions: false,
        }
    }
}

impl GradConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_updates == 0 || self.restarts == 0 {
            return Err(Error::Domain("max_updates and restarts must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Domain("step_size must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one projected-gradient run.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentRun {
    pub theta: PolicyParams,
    pub score: f64,
    /// Score after every accepted update, starting with the initial score.
    pub trace: Vec<f64>,
    pub updates: usize,
}

/// Projected gradient ascent with backtracking from `theta`. Every accepted
/// step does not decrease the score, so the trace is non-decreasing.
pub fn ascend(graph: &ComputeGraph, mut theta: PolicyParams, cfg: &GradConfig) -> AscentRun {
    let mut score = graph.evaluate(&theta);
    let mut trace = vec![score];
    let mut step = cfg.step_size;
    let mut updates = 0;
    'outer: while updates < cfg.max_updates {
        let (_, grad) = graph.value_and_gradient(&theta);
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if scale <= 1e-15 {
            break;
        }
        loop {
            let mut cand = theta.clone();
            for (x, g) in cand.values_mut().iter_mut().zip(&grad) {
                *x += step * g / scale;
            }
            cand.project();
            let moved = cand
                .values()
                .iter()
                .zip(theta.values())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if moved <= 1e-15 {
                // Stuck against the boundary of the feasible set.
                break 'outer;
            }
            let s = graph.evaluate(&cand);
            if s >= score {
                theta = cand;
                score = s;
                trace.push(s);
                updates += 1;
                step = (step * 2.0).min(cfg.step_size);
                break;
            }
            step /= 2.0;
            if step < cfg.min_step {
                break 'outer;
            }
        }
    }
    AscentRun {
        theta,
        score,
        trace,
        updates,
    }
}

/// Corner of the feasible set picked by the gradient sign at `theta`.
pub fn greedy_corner(graph: &ComputeGraph, theta: &PolicyParams) -> PolicyParams {
    let grad = graph.gradient(theta);
    let mut out = theta.clone();
    for t in 0..theta.steps() {
        for l in 0..theta.num_vars() {
            let o = theta.offset(t, l);
            let card = theta.cards()[l];
            let mut d = vec![0.0; card];
            if theta.is_bernoulli(l) {
                d[usize::from(grad[o] > 0.0)] = 1.0;
            } else {
                d[argmax_low(&grad[o..o + card])] = 1.0;
            }
            out.set_dist(t, l, &d);
        }
    }
    out
}

pub fn random_policy(cards: &[usize], steps: usize, rng: &mut impl Rng) -> PolicyParams {
    let mut theta = PolicyParams::uniform(cards, steps);
    for t in 0..steps {
        for (l, &card) in cards.iter().enumerate() {
            let mut d: Vec<f64> = (0..card).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let z: f64 = d.iter().sum();
            d.iter_mut().for_each(|x| *x /= z);
            theta.set_dist(t, l, &d);
        }
    }
    theta
}

fn extract(theta: &PolicyParams, sample: bool, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    if !sample {
        return theta.argmax_plan();
    }
    (0..theta.steps())
        .map(|t| {
            (0..theta.num_vars())
                .map(|l| {
                    let d = theta.dist(t, l);
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    for (v, p) in d.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return v;
                        }
                    }
                    d.len() - 1
                })
                .collect()
        })
        .collect()
}

/// Gradient-based forward planning: maximize the forward approximation of
/// `p(c_T = 1)` over `θ` from several starting points and act on the best.
pub fn sogbofa_plan(
    mdp: &FactoredMdp,
    start: &State,
    lookahead: usize,
    cfg: &GradConfig,
    rng: &mut impl Rng,
) -> Result<ActionAssignment> {
    cfg.validate()?;
    let dbn = unroll(mdp, &StartState::Concrete(start.clone()), lookahead, EvidenceMode::Terminal)?;
    let graph = build_forward_graph(&dbn);
    let cards = mdp.action_cards();
    let uniform = PolicyParams::uniform(&cards, lookahead);
    let mut best: Option<AscentRun> = None;
    let mut total_updates = 0;
    for r in 0..cfg.restarts {
        let init = match r {
            0 => uniform.clone(),
            1 => greedy_corner(&graph, &uniform),
            _ => random_policy(&cards, lookahead, rng),
        };
        let run = ascend(&graph, init, cfg);
        total_updates += run.updates;
        if best.as_ref().is_none_or(|b| run.score > b.score + TIE_TOL) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(ActionAssignment {
        sequence: extract(&best.theta, cfg.sample_actions, rng),
        diagnostics: Diagnostics {
            iterations: total_updates,
            score: best.score,
            converged: true,
            trace: best.trace,
        },
    })
}

/// Largest first-step action space the rollout planner enumerates.
pub const MAX_ROLLOUT_ACTIONS: usize = 1 << 12;

/// Scores of every first action with later actions uniform, in
/// [`FactoredMdp::all_actions`] order.
pub fn rollout_scores(mdp: &FactoredMdp, start: &State, lookahead: usize) -> Result<Vec<f64>> {
    if mdp.joint_action_count() > MAX_ROLLOUT_ACTIONS {
        return Err(Error::Guard(format!(
            "{} joint actions exceed the rollout limit {MAX_ROLLOUT_ACTIONS}",
            mdp.joint_action_count()
        )));
    }
    let dbn = unroll(mdp, &StartState::Concrete(start.clone()), lookahead, EvidenceMode::Terminal)?;
    let graph = build_forward_graph(&dbn);
    let cards = mdp.action_cards();
    Ok(mdp
        .all_actions()
        .iter()
        .map(|a0| {
            let mut theta = PolicyParams::uniform(&cards, lookahead);
            for (l, &v) in a0.iter().enumerate() {
                let mut d = vec![0.0; cards[l]];
                d[v] = 1.0;
                theta.set_dist(0, l, &d);
            }
            graph.evaluate(&theta)
        })
        .collect())
}

/// Enumerates the first action, scoring each with uniform later actions;
/// ties go to the earliest action (the no-op).
pub fn rollout_bp_plan(mdp: &FactoredMdp, start: &State, lookahead: usize) -> Result<ActionAssignment> {
    let scores = rollout_scores(mdp, start, lookahead)?;
    let best = argmax_low(&scores);
    let mut sequence = vec![mdp.all_actions()[best].clone()];
    sequence.extend(std::iter::repeat_n(mdp.noop(), lookahead - 1));
    Ok(ActionAssignment {
        sequence,
        diagnostics: Diagnostics {
            iterations: scores.len(),
            score: scores[best],
            converged: true,
            trace: scores,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::builtin::independent_arms;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn arms_pick_the_better_arm() {
        let mdp = independent_arms(&[0.9, 0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = sogbofa_plan(&mdp, &vec![0, 0], 3, &GradConfig::default(), &mut rng).unwrap();
        assert_eq!(plan.first(), &vec![1]);
        let rollout = rollout_bp_plan(&mdp, &vec![0, 0], 3).unwrap();
        assert_eq!(rollout.first(), &vec![1]);
    }

    #[test]
    fn trace_is_non_decreasing() {
        let mdp = crate::domain::builtin::penalty_corridor(3).unwrap();
        let dbn = unroll(&mdp, &StartState::Concrete(vec![0; 5]), 6, EvidenceMode::Terminal).unwrap();
        let graph = build_forward_graph(&dbn);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let run = ascend(&graph, random_policy(&[2, 2], 6, &mut rng), &GradConfig::default());
        assert!(run.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(run.theta.is_valid());
    }
}
