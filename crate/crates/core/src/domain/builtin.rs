//! Built-in domains and random instance generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{config_values, ActionVar, Cpt, FactoredMdp, ParentRef, RewardFactor, StateVar};

/// Probability that one cook action advances the targeted dish by a stage.
pub const COOK_ADVANCE: f64 = 0.8;

/// `1 - COOK_ADVANCE`, written out so a domain file can state it exactly.
pub const COOK_STALL: f64 = 0.2;

/// Two-dish cooking domain.
///
/// Each dish `d` has four bits `cookMed_d`, `cookWell_d`, `cooking_d`,
/// `watching_d`. The stages `(med, well, cooking)` run
/// `000 -> 001 -> 100 -> 101 -> 110 -> 111`, the last being burned and
/// absorbing. Cooking the dish advances it one stage with probability
/// [`COOK_ADVANCE`]; every advance flips `cooking`, so `cooking'` is the
/// only random bit and `cookMed'`, `cookWell'` follow deterministically from
/// the old stage and `cooking'`. `watching'` copies `cooking'`. A dish pays 1
/// while it is at stage `110` (medium and well done, not on the fire).
pub fn build_cooking() -> FactoredMdp {
    let mut state_vars = Vec::new();
    for d in 1..=2 {
        for base in ["cookMed", "cookWell", "cooking", "watching"] {
            state_vars.push(StateVar {
                name: format!("{base}{d}"),
            });
        }
    }
    let action = ActionVar::enumerated(
        "act",
        vec!["do-nothing".into(), "cook-dish1".into(), "cook-dish2".into()],
    );
    let mut transitions = Vec::new();
    let mut rewards = Vec::new();
    for d in 0..2 {
        let (med, well, cooking) = (4 * d, 4 * d + 1, 4 * d + 2);
        let cook_value = d + 1;
        let stage_parents = vec![ParentRef::State(med), ParentRef::State(well), ParentRef::State(cooking)];

        // cookMed', cookWell' from (med, well, cooking, cooking').
        let mut with_next = stage_parents.clone();
        with_next.push(ParentRef::Next(cooking));
        let advanced = |v: &[usize]| v[2] != v[3];
        let med_probs = table(&[2, 2, 2, 2], |v| {
            let next_med = if advanced(v) {
                // 001 -> 100 sets medium; every later stage already has it.
                v[0] == 1 || v[2] == 1
            } else {
                v[0] == 1
            };
            bit(next_med)
        });
        let well_probs = table(&[2, 2, 2, 2], |v| {
            let next_well = if advanced(v) {
                // 101 -> 110 sets well done; 110 -> 111 keeps it.
                v[1] == 1 || (v[0] == 1 && v[2] == 1)
            } else {
                v[1] == 1
            };
            bit(next_well)
        });
        // cooking' from (med, well, cooking, act).
        let mut cooking_parents = stage_parents.clone();
        cooking_parents.push(ParentRef::Action(0));
        let cooking_probs = table(&[2, 2, 2, 3], |v| {
            let (m, w, c, a) = (v[0], v[1], v[2], v[3]);
            let burned = m == 1 && w == 1 && c == 1;
            let reachable = !(m == 0 && w == 1);
            if a == cook_value && !burned && reachable {
                if c == 1 {
                    COOK_STALL
                } else {
                    COOK_ADVANCE
                }
            } else {
                c as f64
            }
        });
        transitions.push(Cpt {
            parents: with_next.clone(),
            probs: med_probs,
        });
        transitions.push(Cpt {
            parents: with_next,
            probs: well_probs,
        });
        transitions.push(Cpt {
            parents: cooking_parents,
            probs: cooking_probs,
        });
        transitions.push(Cpt {
            parents: vec![ParentRef::Next(cooking)],
            probs: vec![0.0, 1.0],
        });
        rewards.push(RewardFactor {
            name: format!("served{}", d + 1),
            parents: stage_parents,
            values: table(&[2, 2, 2], |v| bit(v[0] == 1 && v[1] == 1 && v[2] == 0)),
        });
    }
    FactoredMdp::new("cooking", state_vars, vec![action], transitions, rewards, vec![0.0; 8], 20)
        .expect("cooking domain is well formed")
}

/// Shift-register chain of `m` bits. `push` sets the first bit with
/// probability 0.9 (0.05 otherwise); each later bit copies its predecessor
/// from the previous step with probability 0.9 (0.05 from a clear bit). The
/// single reward factor pays 1 while the last bit is set. The unrolled
/// network is a polytree.
pub fn chain_reward(m: usize) -> Result<FactoredMdp> {
    if !(1..=12).contains(&m) {
        return Err(Error::Domain(format!("chain-reward length {m} outside 1..=12")));
    }
    chain_with(m, [0.05, 0.9], [0.05, 0.9])
}

fn chain_with(m: usize, push: [f64; 2], copy: [f64; 2]) -> Result<FactoredMdp> {
    let state_vars = (1..=m).map(|i| StateVar { name: format!("s{i}") }).collect();
    let mut transitions = vec![Cpt {
        parents: vec![ParentRef::Action(0)],
        probs: push.to_vec(),
    }];
    for i in 1..m {
        transitions.push(Cpt {
            parents: vec![ParentRef::State(i - 1)],
            probs: copy.to_vec(),
        });
    }
    FactoredMdp::new(
        format!("chain-reward-{m}"),
        state_vars,
        vec![ActionVar::binary("push")],
        transitions,
        vec![RewardFactor {
            name: "end".into(),
            parents: vec![ParentRef::State(m - 1)],
            values: vec![0.0, 1.0],
        }],
        vec![0.0; m],
        20,
    )
}

/// Default payoffs of [`independent_arms`].
pub const ARM_PAYOFFS: [f64; 2] = [0.9, 0.1];

/// `n` arms behind one enumerated action `{noop, pull1, .., pulln}`. Pulling
/// arm `i` pays its expected payoff immediately and sets the bit `pulled_i`;
/// the no-op pays 0. The bits never affect reward, so the best plan pulls the
/// best arm at every step.
pub fn independent_arms(payoffs: &[f64]) -> Result<FactoredMdp> {
    let n = payoffs.len();
    if !(1..=8).contains(&n) {
        return Err(Error::Domain(format!("independent-arms needs 1..=8 arms, got {n}")));
    }
    let mut values = vec!["noop".to_string()];
    values.extend((1..=n).map(|i| format!("pull{i}")));
    let state_vars = (1..=n).map(|i| StateVar { name: format!("pulled{i}") }).collect();
    let transitions = (0..n)
        .map(|i| Cpt {
            parents: vec![ParentRef::Action(0)],
            probs: (0..=n).map(|a| bit(a == i + 1)).collect(),
        })
        .collect();
    let mut reward = vec![0.0];
    reward.extend_from_slice(payoffs);
    FactoredMdp::new(
        format!("independent-arms-{n}"),
        state_vars,
        vec![ActionVar::enumerated("arm", values)],
        transitions,
        vec![RewardFactor {
            name: "payoff".into(),
            parents: vec![ParentRef::Action(0)],
            values: reward,
        }],
        vec![0.0; n],
        20,
    )
}

/// Reward values of [`penalty_corridor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorRewards {
    /// Per step inside the corridor (entered, goal not reached).
    pub corridor: f64,
    /// Per step at the goal.
    pub goal: f64,
    /// Per step after falling into the pit.
    pub fall: f64,
    /// Immediate payment for `grab`.
    pub lure: f64,
    /// Per step while trapped.
    pub trap: f64,
}

pub const CORRIDOR_REWARDS: CorridorRewards = CorridorRewards {
    corridor: -1.0,
    goal: 2.0,
    fall: -3.0,
    lure: 1.0,
    trap: -3.0,
};

/// A corridor of `depth` cells in front of an absorbing goal, with default
/// rewards [`CORRIDOR_REWARDS`].
///
/// `reached_i` is a thermometer code of the position and `advance` moves one
/// cell forward. Stopping inside the corridor sends the agent back to the
/// entrance and drops it into an absorbing pit (`fallen`); stopping at the
/// entrance is safe and the goal is absorbing. `grab` pays a small lure but
/// sets the absorbing `trapped` bit. Doing nothing scores 0, walking
/// straight to the goal scores positive, taking the lure every step scores
/// negative, and under uniformly random continuations every first action
/// looks worse than waiting.
pub fn penalty_corridor(depth: usize) -> Result<FactoredMdp> {
    penalty_corridor_with(depth, CORRIDOR_REWARDS)
}

pub fn penalty_corridor_with(depth: usize, r: CorridorRewards) -> Result<FactoredMdp> {
    if !(1..=8).contains(&depth) {
        return Err(Error::Domain(format!("penalty-corridor depth {depth} outside 1..=8")));
    }
    let mut state_vars: Vec<StateVar> = (1..=depth)
        .map(|i| StateVar {
            name: format!("reached{i}"),
        })
        .collect();
    state_vars.push(StateVar { name: "fallen".into() });
    state_vars.push(StateVar { name: "trapped".into() });
    let (advance, grab) = (0, 1);
    let goal = depth - 1;
    let (fallen, trapped) = (depth, depth + 1);
    let mut transitions = Vec::new();
    for i in 0..depth {
        // reached_i' = goal | advance & reached_{i-1}
        let mut parents = Vec::new();
        if i > 0 {
            parents.push(ParentRef::State(i - 1));
        }
        parents.push(ParentRef::State(goal));
        parents.push(ParentRef::Action(advance));
        let cards = vec![2; parents.len()];
        let probs = table(&cards, |v| {
            let n = v.len();
            let before = i == 0 || v[0] == 1;
            bit(v[n - 2] == 1 || before && v[n - 1] == 1)
        });
        transitions.push(Cpt { parents, probs });
    }
    transitions.push(if depth == 1 {
        Cpt {
            parents: vec![ParentRef::State(fallen)],
            probs: vec![0.0, 1.0],
        }
    } else {
        // fallen' = fallen | reached_1 & !goal & !advance
        let parents = vec![
            ParentRef::State(fallen),
            ParentRef::State(0),
            ParentRef::State(goal),
            ParentRef::Action(advance),
        ];
        let probs = table(&[2, 2, 2, 2], |v| bit(v[0] == 1 || v[1] == 1 && v[2] == 0 && v[3] == 0));
        Cpt { parents, probs }
    });
    transitions.push(Cpt {
        parents: vec![ParentRef::State(trapped), ParentRef::Action(grab)],
        probs: vec![0.0, 1.0, 1.0, 1.0],
    });
    let corridor = if depth == 1 {
        RewardFactor {
            name: "corridor".into(),
            parents: vec![ParentRef::State(0)],
            values: vec![0.0, 0.0],
        }
    } else {
        RewardFactor {
            name: "corridor".into(),
            parents: vec![ParentRef::State(0), ParentRef::State(goal)],
            values: vec![0.0, 0.0, r.corridor, 0.0],
        }
    };
    let unary = |name: &str, parent: ParentRef, v: f64| RewardFactor {
        name: name.into(),
        parents: vec![parent],
        values: vec![0.0, v],
    };
    let rewards = vec![
        corridor,
        unary("goal", ParentRef::State(goal), r.goal),
        unary("fall", ParentRef::State(fallen), r.fall),
        unary("lure", ParentRef::Action(grab), r.lure),
        unary("trap", ParentRef::State(trapped), r.trap),
    ];
    FactoredMdp::new(
        format!("penalty-corridor-{depth}"),
        state_vars,
        vec![ActionVar::binary("advance"), ActionVar::binary("grab")],
        transitions,
        rewards,
        vec![0.0; depth + 2],
        20,
    )
}

/// Names accepted by [`build_synthetic`].
pub const SYNTHETIC_NAMES: [&str; 3] = ["chain-reward", "independent-arms", "penalty-corridor"];

/// Builds a synthetic domain by name. `size` is the chain length, the number
/// of arms (payoffs spread evenly from 0.9 down to 0.1; two arms give the
/// defaults) or the corridor depth.
pub fn build_synthetic(name: &str, size: usize) -> Result<FactoredMdp> {
    match name {
        "chain-reward" => chain_reward(size),
        "independent-arms" => {
            if size == 0 {
                return Err(Error::Domain("independent-arms needs at least one arm".into()));
            }
            let payoffs: Vec<f64> = if size == 1 {
                vec![ARM_PAYOFFS[0]]
            } else {
                (0..size)
                    .map(|i| ARM_PAYOFFS[0] - (ARM_PAYOFFS[0] - ARM_PAYOFFS[1]) * i as f64 / (size - 1) as f64)
                    .collect()
            };
            independent_arms(&payoffs)
        }
        "penalty-corridor" => penalty_corridor(size),
        other => Err(Error::Unknown(format!("synthetic domain {other}"))),
    }
}

/// Resolves `cooking` or `<synthetic>-<size>` (e.g. `chain-reward-3`).
pub fn by_name(name: &str) -> Result<FactoredMdp> {
    if name == "cooking" {
        return Ok(build_cooking());
    }
    for base in SYNTHETIC_NAMES {
        if let Some(rest) = name.strip_prefix(base) {
            let size = match rest.strip_prefix('-') {
                Some(n) => n
                    .parse()
                    .map_err(|_| Error::Unknown(format!("built-in domain {name}")))?,
                None if rest.is_empty() => match base {
                    "independent-arms" => 2,
                    _ => 3,
                },
                None => continue,
            };
            return build_synthetic(base, size);
        }
    }
    Err(Error::Unknown(format!("built-in domain {name}")))
}

/// Shape of a random MDP from [`random_mdp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomMdpShape {
    pub state_vars: usize,
    pub action_vars: usize,
    pub reward_factors: usize,
    /// Maximum number of parents per transition table.
    pub max_parents: usize,
    /// Allow same-slice arcs (always acyclic: only to earlier variables).
    pub synchronic: bool,
    /// Fraction of transition entries forced to 0 or 1.
    pub deterministic_fraction: f64,
}

impl Default for RandomMdpShape {
    fn default() -> Self {
        RandomMdpShape {
            state_vars: 3,
            action_vars: 2,
            reward_factors: 2,
            max_parents: 3,
            synchronic: true,
            deterministic_fraction: 0.2,
        }
    }
}

/// A random binary MDP drawn from `seed`.
pub fn random_mdp(shape: &RandomMdpShape, seed: u64) -> FactoredMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = shape.state_vars.max(1);
    let n = shape.action_vars.max(1);
    let state_vars = (0..m).map(|i| StateVar { name: format!("x{i}") }).collect();
    let action_vars = (0..n).map(|i| ActionVar::binary(format!("a{i}"))).collect();
    let mut transitions = Vec::with_capacity(m);
    for i in 0..m {
        let mut pool: Vec<ParentRef> = (0..m).map(ParentRef::State).chain((0..n).map(ParentRef::Action)).collect();
        if shape.synchronic {
            pool.extend((0..i).map(ParentRef::Next));
        }
        let k = rng.gen_range(1..=shape.max_parents.max(1).min(pool.len()));
        let mut parents = Vec::with_capacity(k);
        while parents.len() < k {
            let p = pool[rng.gen_range(0..pool.len())];
            if !parents.contains(&p) {
                parents.push(p);
            }
        }
        let probs = (0..1usize << k)
            .map(|_| {
                if rng.gen_bool(shape.deterministic_fraction.clamp(0.0, 1.0)) {
                    bit(rng.gen_bool(0.5))
                } else {
                    rng.gen_range(0.02..0.98)
                }
            })
            .collect();
        transitions.push(Cpt { parents, probs });
    }
    let rewards = (0..shape.reward_factors.max(1))
        .map(|f| {
            let pool: Vec<ParentRef> = (0..m).map(ParentRef::State).chain((0..n).map(ParentRef::Action)).collect();
            let k = rng.gen_range(1..=2.min(pool.len()));
            let mut parents = Vec::with_capacity(k);
            while parents.len() < k {
                let p = pool[rng.gen_range(0..pool.len())];
                if !parents.contains(&p) {
                    parents.push(p);
                }
            }
            RewardFactor {
                name: format!("f{f}"),
                parents,
                values: (0..1usize << k).map(|_| (rng.gen_range(-5.0..5.0f64) * 4.0).round() / 4.0).collect(),
            }
        })
        .collect();
    let initial = (0..m).map(|_| rng.gen_range(0.1..0.9)).collect();
    FactoredMdp::new("random", state_vars, action_vars, transitions, rewards, initial, 4)
        .expect("random generator produces valid models")
}

/// A random shift-register chain (same structure as [`chain_reward`], random
/// probabilities), whose unrolled network is a polytree.
pub fn random_chain(m: usize, seed: u64) -> FactoredMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
    let (push, copy) = (draw(), draw());
    let mut mdp = chain_with(m.clamp(1, 12), push, copy).expect("valid chain");
    mdp.initial = (0..mdp.num_state_vars()).map(|_| rng.gen_range(0.1..0.9)).collect();
    mdp.name = format!("random-chain-{m}");
    mdp
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn table(cards: &[usize], f: impl Fn(&[usize]) -> f64) -> Vec<f64> {
    let size: usize = cards.iter().product();
    (0..size).map(|i| f(&config_values(cards, i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_dist(mdp: &FactoredMdp, s: &[usize], a: &[usize]) -> Vec<(Vec<usize>, f64)> {
        let m = mdp.num_state_vars();
        (0..1usize << m)
            .filter_map(|i| {
                let ns: Vec<usize> = (0..m).map(|j| (i >> (m - 1 - j)) & 1).collect();
                let p: f64 = (0..m)
                    .map(|j| {
                        let p1 = mdp.transition_prob(j, s, a, &ns);
                        if ns[j] == 1 {
                            p1
                        } else {
                            1.0 - p1
                        }
                    })
                    .product();
                (p > 0.0).then_some((ns, p))
            })
            .collect()
    }

    #[test]
    fn cooking_noop_keeps_all_zero() {
        let mdp = build_cooking();
        let d = step_dist(&mdp, &[0; 8], &[0]);
        assert_eq!(d, vec![(vec![0; 8], 1.0)]);
        assert_eq!(mdp.reward(&[0; 8], &[0]), 0.0);
    }

    #[test]
    fn cooking_first_dish_starts_with_advance_probability() {
        let mdp = build_cooking();
        let d = step_dist(&mdp, &[0; 8], &[1]);
        assert_eq!(d.len(), 2);
        let on: f64 = d.iter().filter(|(s, _)| s[2] == 1).map(|(_, p)| p).sum();
        assert!((on - COOK_ADVANCE).abs() < 1e-15);
        for (s, _) in &d {
            assert_eq!(s[2], s[3], "watching copies cooking");
            assert_eq!(&s[4..], &[0, 0, 0, 0]);
        }
    }

    #[test]
    fn cooking_stage_progression() {
        let mdp = build_cooking();
        let stages = [[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]];
        for w in stages.windows(2) {
            let mut s = vec![0; 8];
            s[..3].copy_from_slice(&w[0]);
            s[3] = w[0][2];
            let d = step_dist(&mdp, &s, &[1]);
            let next: Vec<usize> = w[1].to_vec();
            let p: f64 = d.iter().filter(|(ns, _)| ns[..3] == next[..]).map(|(_, p)| p).sum();
            assert!((p - COOK_ADVANCE).abs() < 1e-15, "{:?} -> {:?}", w[0], w[1]);
        }
        let burned = [1, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(step_dist(&mdp, &burned, &[1]), vec![(burned.to_vec(), 1.0)]);
        let served = [1, 1, 0, 0, 0, 0, 0, 0];
        assert_eq!(mdp.reward(&served, &[0]), 1.0);
        assert_eq!(mdp.reward(&burned, &[0]), 0.0);
    }

    #[test]
    fn corridor_dynamics() {
        let mdp = penalty_corridor(3).unwrap();
        let r = CORRIDOR_REWARDS;
        // advance from the entrance
        assert_eq!(step_dist(&mdp, &[0, 0, 0, 0, 0], &[1, 0]), vec![(vec![1, 0, 0, 0, 0], 1.0)]);
        // waiting at the entrance is safe
        assert_eq!(step_dist(&mdp, &[0, 0, 0, 0, 0], &[0, 0]), vec![(vec![0, 0, 0, 0, 0], 1.0)]);
        // stopping inside the corridor resets and falls
        assert_eq!(step_dist(&mdp, &[1, 1, 0, 0, 0], &[0, 0]), vec![(vec![0, 0, 0, 1, 0], 1.0)]);
        // the goal is absorbing; grabbing traps
        assert_eq!(step_dist(&mdp, &[1, 1, 1, 0, 0], &[0, 1]), vec![(vec![1, 1, 1, 0, 1], 1.0)]);
        assert_eq!(mdp.reward(&[1, 0, 0, 0, 0], &[1, 0]), r.corridor);
        assert_eq!(mdp.reward(&[1, 1, 1, 1, 1], &[0, 1]), r.goal + r.fall + r.lure + r.trap);
    }

    #[test]
    fn by_name_resolves() {
        assert_eq!(by_name("chain-reward-4").unwrap().num_state_vars(), 4);
        assert_eq!(by_name("independent-arms").unwrap().joint_action_count(), 3);
        assert_eq!(by_name("penalty-corridor").unwrap().num_state_vars(), 5);
        assert!(matches!(by_name("nope"), Err(Error::Unknown(_))));
        assert!(matches!(build_synthetic("nope", 2), Err(Error::Unknown(_))));
    }

    #[test]
    fn random_mdp_is_deterministic() {
        let shape = RandomMdpShape::default();
        assert_eq!(random_mdp(&shape, 7), random_mdp(&shape, 7));
    }
}
