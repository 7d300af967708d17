//! Seeded simulation and the receding-horizon loop.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dbnplan_core::mfvi::ElboTrace;
use dbnplan_core::{Action, FactoredMdp, State};

use crate::planners::Planner;

/// Samples the next state variable by variable in synchronic order and
/// returns it with the raw reward `R(state, action)`.
pub fn simulate_step(mdp: &FactoredMdp, state: &[usize], action: &[usize], rng: &mut impl Rng) -> (State, f64) {
    let mut next = vec![0; mdp.num_state_vars()];
    for &m in mdp.synchronic_topological_order() {
        let p = mdp.transition_prob(m, state, action, &next);
        next[m] = usize::from(rng.gen::<f64>() < p);
    }
    (next, mdp.reward(state, action))
}

/// Draws the start state from the model's initial distribution.
pub fn sample_initial(mdp: &FactoredMdp, rng: &mut impl Rng) -> State {
    mdp.initial.iter().map(|&p| usize::from(rng.gen::<f64>() < p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub simulations: usize,
    /// Lookahead cap; each step plans `min(max_lookahead, remaining)` ahead.
    pub max_lookahead: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            horizon: 40,
            simulations: 12,
            max_lookahead: 9,
        }
    }
}

impl EpisodeConfig {
    pub fn lookahead(&self, step: usize) -> usize {
        self.max_lookahead.min(self.horizon - step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: State,
    pub lookahead: usize,
    pub action: Action,
    pub reward: f64,
    pub cum_reward: f64,
    pub iterations: usize,
    pub score: f64,
    pub elbo: Option<ElboTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<StepRecord>,
    /// Planner failure that ended the episode early, with its step.
    pub failure: Option<(usize, String)>,
}

impl EpisodeTrace {
    pub fn total_return(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cum_reward)
    }
}

/// 64-bit mixing used to derive independent seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| mix(acc ^ mix(p)))
}

/// Environment seed: shared by every algorithm on the same simulation, so
/// planners are compared on common random numbers.
pub fn env_seed(base: u64, instance: usize, sim: usize) -> u64 {
    derive_seed(&[base, 1, instance as u64, sim as u64])
}

pub fn planner_seed(base: u64, instance: usize, algo: &str, sim: usize) -> u64 {
    let tag = algo.bytes().fold(0u64, |h, b| mix(h ^ u64::from(b)));
    derive_seed(&[base, 2, instance as u64, tag, sim as u64])
}

/// Runs one episode. The planner sees the current state as a point mass and
/// only its first action is executed.
pub fn run_episode(
    mdp: &FactoredMdp,
    planner: &dyn Planner,
    cfg: &EpisodeConfig,
    env_seed: u64,
    planner_seed: u64,
) -> EpisodeTrace {
    let mut env = ChaCha8Rng::seed_from_u64(env_seed);
    let mut prng = ChaCha8Rng::seed_from_u64(planner_seed);
    let mut state = sample_initial(mdp, &mut env);
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut cum = 0.0;
    for step in 0..cfg.horizon {
        let lookahead = cfg.lookahead(step);
        let out = match planner.plan(mdp, &state, lookahead, &mut prng) {
            Ok(o) => o,
            Err(e) => {
                return EpisodeTrace {
                    steps,
                    failure: Some((step, e.to_string())),
                }
            }
        };
        let action = out.assignment.first().clone();
        let (next, reward) = simulate_step(mdp, &state, &action, &mut env);
        cum += reward;
        steps.push(StepRecord {
            state: std::mem::replace(&mut state, next),
            lookahead,
            action,
            reward,
            cum_reward: cum,
            iterations: out.assignment.diagnostics.iterations,
            score: out.assignment.diagnostics.score,
            elbo: out.elbo,
        });
    }
    EpisodeTrace { steps, failure: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planners::build_planner;
    use dbnplan_core::domain::builtin::build_cooking;

    #[test]
    fn lookahead_shrinks_at_the_end() {
        let cfg = EpisodeConfig {
            horizon: 40,
            ..Default::default()
        };
        let ls: Vec<usize> = (0..40).map(|s| cfg.lookahead(s)).collect();
        assert!(ls[..32].iter().all(|&l| l == 9));
        assert_eq!(&ls[32..], &[8, 7, 6, 5, 4, 3, 2, 1]);
    }

    #[test]
    fn cooking_idle_stays_idle() {
        let mdp = build_cooking();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, r) = simulate_step(&mdp, &[0; 8], &mdp.noop(), &mut rng);
        assert_eq!(next, vec![0; 8]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn returns_add_up() {
        let mdp = build_cooking();
        let planner = build_planner("random", None).unwrap();
        let cfg = EpisodeConfig {
            horizon: 15,
            ..Default::default()
        };
        let tr = run_episode(&mdp, planner.as_ref(), &cfg, 1, 2);
        let sum: f64 = tr.steps.iter().map(|s| s.reward).sum();
        assert_eq!(tr.steps.len(), 15);
        assert!((tr.total_return() - sum).abs() < 1e-12);
    }
}
