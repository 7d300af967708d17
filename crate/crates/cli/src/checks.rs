//! Invariant suite shared by `plan check` and the acceptance target.
//!
//! Every check compares an implementation against something computed
//! independently: variable elimination, brute-force enumeration, direct
//! state-distribution propagation or finite differences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dbnplan_core::bp::{build_factor_graph, dbn_marginals, forward_value, BpConfig, Schedule};
use dbnplan_core::csvi::{estimate_log_g, Target, TrajectorySampler, CsviConfig};
use dbnplan_core::dbn::{NodeKind, RewardNormalization};
use dbnplan_core::domain::builtin::{build_cooking, chain_reward, random_chain, random_mdp, RandomMdpShape};
use dbnplan_core::exact::{policy_step_returns, ExactOracle};
use dbnplan_core::forward::{build_forward_graph, random_policy};
use dbnplan_core::mfvi::{MeanField, UpdateMask, VariationalPosterior, EPSILON};
use dbnplan_core::{
    unroll, ActionVar, Cpt, EvidenceMode, FactoredMdp, ParentRef, PolicyParams, RewardFactor, StartState, StateVar,
    UnrolledDbn,
};

/// Outcome of one check: the worst observed value against its limit.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckOutcome { name, passed, detail }
    }

    fn failed(name: &'static str, err: impl std::fmt::Display) -> Self {
        CheckOutcome::new(name, false, format!("error: {err}"))
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Problem sizes: `quick` for `plan check`, `full` for acceptance.
#[derive(Debug, Clone, Copy)]
pub struct Sizes {
    pub models: usize,
    pub gradient_points: usize,
    pub mfvi_updates: usize,
    pub completions: usize,
    pub bias_seeds: usize,
}

impl Sizes {
    pub fn full() -> Self {
        Sizes {
            models: 20,
            gradient_points: 20,
            mfvi_updates: 1000,
            completions: 100,
            bias_seeds: 200,
        }
    }

    pub fn quick() -> Self {
        Sizes {
            models: 5,
            gradient_points: 5,
            mfvi_updates: 200,
            completions: 20,
            bias_seeds: 40,
        }
    }
}

/// Random model with at most 4 state variables, 2 action variables and 3
/// reward factors.
pub fn small_model(seed: u64) -> FactoredMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let shape = RandomMdpShape {
        state_vars: rng.gen_range(1..=4),
        action_vars: rng.gen_range(1..=2),
        reward_factors: rng.gen_range(1..=3),
        ..Default::default()
    };
    random_mdp(&shape, seed)
}

fn random_start(mdp: &FactoredMdp, rng: &mut ChaCha8Rng) -> StartState {
    if rng.gen_bool(0.5) {
        StartState::from_mdp(mdp)
    } else {
        StartState::Concrete((0..mdp.num_state_vars()).map(|_| rng.gen_range(0..2)).collect())
    }
}

fn unrolled_with_policy(mdp: &FactoredMdp, start: &StartState, t: usize, mode: EvidenceMode, rng: &mut ChaCha8Rng) -> dbnplan_core::Result<UnrolledDbn> {
    let theta = random_policy(&mdp.action_cards(), t, rng);
    Ok(unroll(mdp, start, t, mode)?.with_policy(&theta))
}

/// The cumulative chain averages the step rewards, `E[c_T] = (1/T) Σ E[r_t]`,
/// and the collecting chain averages the partial rewards of each step. Both
/// sides come from variable elimination; the step rewards are also checked
/// against direct propagation of the state distribution.
pub fn reward_chain_identities(sizes: Sizes) -> CheckOutcome {
    const NAME: &str = "reward chains average their inputs";
    let run = || -> dbnplan_core::Result<(f64, f64, f64)> {
        let (mut worst_c, mut worst_k, mut worst_raw) = (0.0f64, 0.0f64, 0.0f64);
        for seed in 0..sizes.models as u64 {
            let mdp = small_model(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.gen_range(1..=4);
            let start = random_start(&mdp, &mut rng);
            let dbn = unrolled_with_policy(&mdp, &start, t, EvidenceMode::Terminal, &mut rng)?;
            let oracle = ExactOracle::new(&dbn);
            let rewards: Vec<f64> = (1..=t).map(|s| oracle.prior_reward(s)).collect::<dbnplan_core::Result<_>>()?;
            let ct = oracle.prior_cumulative(t)?;
            worst_c = worst_c.max((ct - rewards.iter().sum::<f64>() / t as f64).abs());

            // Normalized step rewards from the MDP itself.
            let norm = RewardNormalization::for_mdp(&mdp, EvidenceMode::Terminal);
            let k = mdp.rewards.len() as f64;
            let steps = policy_step_returns(&mdp, &start, &dbn.policy())?;
            if !norm.is_constant() {
                for (r, raw) in rewards.iter().zip(&steps) {
                    let expect = (raw - k * norm.min) / (k * (norm.max - norm.min));
                    worst_raw = worst_raw.max((r - expect).abs());
                }
            }

            // Collecting chain, conditioned on every (s_0, a_0).
            if mdp.rewards.len() > 1 {
                let free = dbn.without_evidence();
                let oracle = ExactOracle::new(&free);
                let cond: Vec<usize> = (0..mdp.num_state_vars())
                    .map(|m| free.state_node(0, m))
                    .chain((0..mdp.num_action_vars()).map(|l| free.action_node(0, l)))
                    .collect();
                let last = *free.collect_nodes(1).last().expect("K > 1");
                let partial = free.partial_nodes(1).to_vec();
                for config in 0..1usize << cond.len() {
                    let ev: BTreeMap<usize, usize> =
                        cond.iter().enumerate().map(|(i, &n)| (n, (config >> i) & 1)).collect();
                    let f = oracle.joint_with(&[last], &ev)?;
                    let lhs = f.table[1] / f.total();
                    let mut rhs = 0.0;
                    for &p in &partial {
                        let g = oracle.joint_with(&[p], &ev)?;
                        rhs += g.table[1] / g.total();
                    }
                    rhs /= partial.len() as f64;
                    worst_k = worst_k.max((lhs - rhs).abs());
                }
            }
        }
        Ok((worst_c, worst_k, worst_raw))
    };
    match run() {
        Ok((c, k, raw)) => {
            let passed = c <= 1e-12 && k <= 1e-12 && raw <= 1e-12;
            CheckOutcome::new(
                NAME,
                passed,
                format!("{} models, max |E[c_T] - mean E[r_t]| = {c:.2e}, max collecting gap = {k:.2e}, max step-reward gap = {raw:.2e} (limit 1e-12)", sizes.models),
            )
        }
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// Belief propagation is exact on polytrees, and without evidence one
/// topological sweep reaches the fixed point.
pub fn bp_tree_exactness(sizes: Sizes) -> CheckOutcome {
    const NAME: &str = "belief propagation exact on trees";
    let run = || -> dbnplan_core::Result<(f64, f64)> {
        let (mut worst, mut worst_sweep) = (0.0f64, 0.0f64);
        for seed in 0..sizes.models as u64 {
            let mdp = random_chain(1 + seed as usize % 4, seed);
            let t = 1 + seed as usize % 5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dbn = unrolled_with_policy(&mdp, &StartState::from_mdp(&mdp), t, EvidenceMode::Terminal, &mut rng)?;
            let exact = ExactOracle::new(&dbn);
            for schedule in [Schedule::Parallel, Schedule::SequentialTopological] {
                let cfg = BpConfig {
                    schedule,
                    max_iterations: 200,
                    tolerance: 1e-15,
                    ..Default::default()
                };
                let bp = dbn_marginals(&dbn, &cfg)?;
                for id in dbn.latent_nodes() {
                    let ex = exact.posterior(id)?;
                    for (a, b) in bp.marginals[id].iter().zip(&ex) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            let free = dbn.without_evidence();
            let mut fg = build_factor_graph(&free);
            let cfg = BpConfig {
                schedule: Schedule::SequentialTopological,
                ..Default::default()
            };
            fg.iterate(&cfg)?;
            worst_sweep = worst_sweep.max(fg.iterate(&cfg)?);
        }
        Ok((worst, worst_sweep))
    };
    match run() {
        Ok((w, s)) => CheckOutcome::new(
            NAME,
            w <= 1e-9 && s <= 1e-12,
            format!("{} chains, max marginal error = {w:.2e} (limit 1e-9), delta after one sweep = {s:.2e} (limit 1e-12)", sizes.models),
        ),
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// Reverse-mode gradients agree with central differences, and the forward
/// graph's value equals the no-evidence belief-propagation value.
pub fn forward_gradient(sizes: Sizes) -> CheckOutcome {
    const NAME: &str = "forward-graph gradient and value";
    let run = || -> dbnplan_core::Result<(f64, f64)> {
        let (mut worst_rel, mut worst_val) = (0.0f64, 0.0f64);
        let mut models: Vec<FactoredMdp> = (0..3).map(|s| small_model(100 + s)).collect();
        models.push(chain_reward(3)?);
        models.push(build_cooking());
        for (i, mdp) in models.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let t = 2 + i % 3;
            let start = StartState::Concrete(vec![0; mdp.num_state_vars()]);
            let dbn = unroll(mdp, &start, t, EvidenceMode::Terminal)?;
            let graph = build_forward_graph(&dbn);
            for _ in 0..sizes.gradient_points {
                let theta = random_policy(&mdp.action_cards(), t, &mut rng);
                let (value, grad) = graph.value_and_gradient(&theta);
                let h = 1e-6;
                let mut fd = vec![0.0; grad.len()];
                for (k, g) in fd.iter_mut().enumerate() {
                    let (mut up, mut down) = (theta.clone(), theta.clone());
                    up.values_mut()[k] += h;
                    down.values_mut()[k] -= h;
                    *g = (graph.evaluate(&up) - graph.evaluate(&down)) / (2.0 * h);
                }
                let scale = fd.iter().chain(&grad).fold(0.0f64, |m, x| m.max(x.abs()));
                let err = grad.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                if scale > 0.0 {
                    worst_rel = worst_rel.max(err / scale);
                }
                let bp = forward_value(&dbn.clone().with_policy(&theta), &BpConfig::default())?;
                worst_val = worst_val.max((bp - value).abs());
            }
        }
        Ok((worst_rel, worst_val))
    };
    match run() {
        Ok((rel, val)) => CheckOutcome::new(
            NAME,
            rel <= 1e-4 && val <= 1e-9,
            format!("5 models x {} points, max relative gradient error = {rel:.2e} (limit 1e-4), max |graph - BP| = {val:.2e} (limit 1e-9)", sizes.gradient_points),
        ),
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// Small enough networks for exhaustive ELBO evaluation (at most 12 nodes).
fn mfvi_instance(seed: u64) -> dbnplan_core::Result<UnrolledDbn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = RandomMdpShape {
        state_vars: 2,
        action_vars: 1,
        reward_factors: rng.gen_range(1..=2),
        ..Default::default()
    };
    let mdp = random_mdp(&shape, seed);
    let t = if shape.reward_factors == 1 { 2 } else { 1 };
    let start = random_start(&mdp, &mut rng);
    unrolled_with_policy(&mdp, &start, t, EvidenceMode::Terminal, &mut rng)
}

/// `E_q[log p̃(x)] + H(q)` by enumerating every joint assignment, with table
/// entries floored at `ε` inside the logarithm.
pub fn enumerated_elbo(q: &VariationalPosterior, dbn: &UnrolledDbn) -> f64 {
    let cards: Vec<usize> = dbn.nodes.iter().map(|n| n.card).collect();
    let mut x = vec![0usize; cards.len()];
    let mut sum = 0.0;
    loop {
        let w: f64 = x.iter().enumerate().map(|(i, &v)| q.dist(i)[v]).product();
        if w > 0.0 {
            let mut logp = 0.0;
            for (i, n) in dbn.nodes.iter().enumerate() {
                let mut config = 0;
                for &p in &n.parents {
                    config = config * dbn.node(p).card + x[p];
                }
                logp += n.prob(config, x[i]).max(EPSILON).ln();
            }
            sum += w * logp;
        }
        let mut i = x.len();
        loop {
            if i == 0 {
                let h: f64 = (0..dbn.len())
                    .filter(|&i| q.is_latent(i))
                    .map(|i| -q.dist(i).iter().map(|p| p * p.ln()).sum::<f64>())
                    .sum();
                return sum + h;
            }
            i -= 1;
            x[i] += 1;
            if x[i] < cards[i] {
                break;
            }
            x[i] = 0;
        }
    }
}

/// Random single-coordinate updates never decrease the ELBO, which stays
/// below the exact log evidence; masked state nodes never move.
pub fn mfvi_coordinate_ascent(sizes: Sizes) -> CheckOutcome {
    const NAME: &str = "mean-field coordinate ascent";
    let run = || -> dbnplan_core::Result<(f64, f64, usize, bool)> {
        let mut worst_delta = f64::INFINITY;
        let mut worst_gap = f64::NEG_INFINITY;
        let mut done = 0;
        let mut seed = 0;
        let per_instance = 50;
        while done < sizes.mfvi_updates {
            let dbn = mfvi_instance(seed)?;
            seed += 1;
            // The floored logarithms keep the ELBO finite when the evidence
            // is impossible, where no bound can hold.
            let z = ExactOracle::new(&dbn).evidence_probability()?;
            if z <= 0.0 {
                continue;
            }
            let log_z = z.ln();
            let mf = MeanField::new(&dbn);
            let mut q = VariationalPosterior::init(&dbn);
            let latent: Vec<usize> = dbn.latent_nodes().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut before = enumerated_elbo(&q, &dbn);
            worst_gap = worst_gap.max(before - log_z);
            for _ in 0..per_instance.min(sizes.mfvi_updates - done) {
                let id = latent[rng.gen_range(0..latent.len())];
                mf.update(&mut q, id);
                let after = enumerated_elbo(&q, &dbn);
                worst_delta = worst_delta.min(after - before);
                worst_gap = worst_gap.max(after - log_z);
                before = after;
                done += 1;
            }
        }
        // Masked sweeps on cooking and on the random instances.
        let mut untouched = true;
        let cooking = build_cooking();
        let mut nets = vec![unroll(&cooking, &StartState::Concrete(vec![0; 8]), 4, EvidenceMode::Terminal)?];
        for s in 0..5 {
            nets.push(mfvi_instance(1000 + s)?);
        }
        for dbn in &nets {
            let mf = MeanField::new(dbn);
            let mut q = VariationalPosterior::init(dbn);
            mf.run_sweeps(&mut q, &UpdateMask::no_states(), 20, 1e-12, dbnplan_core::mfvi::SweepOrder::TimeMajor, 0, &mut Vec::new());
            for id in dbn.latent_nodes() {
                if matches!(dbn.node(id).kind, NodeKind::State { .. }) && q.dist(id) != [0.5, 0.5] {
                    untouched = false;
                }
            }
        }
        Ok((worst_delta, worst_gap, seed as usize, untouched))
    };
    match run() {
        Ok((d, gap, n, untouched)) => CheckOutcome::new(
            NAME,
            d >= -1e-9 && gap <= 1e-9 && untouched,
            format!(
                "{} updates on {n} networks, min ELBO delta = {d:.2e} (limit -1e-9), max ELBO - log p(evidence) = {gap:.2e} (limit 1e-9), masked states unchanged = {untouched}",
                sizes.mfvi_updates
            ),
        ),
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// `E_q[log p(evidence, A) - log q(A)]` by enumerating every action sequence
/// and conditioning exactly on it.
pub fn collapsed_objective(dbn: &UnrolledDbn, q: &PolicyParams) -> dbnplan_core::Result<f64> {
    let cards = dbn.action_cards();
    let vars: Vec<(usize, usize)> = (0..dbn.lookahead).flat_map(|t| (0..cards.len()).map(move |l| (t, l))).collect();
    let total: usize = vars.iter().map(|&(_, l)| cards[l]).product();
    let oracle = ExactOracle::new(dbn);
    let mut acc = 0.0;
    for index in 0..total {
        let mut rest = index;
        let mut ev = dbn.evidence.clone();
        let mut log_q = 0.0;
        for &(t, l) in &vars {
            let v = rest % cards[l];
            rest /= cards[l];
            ev.insert(dbn.action_node(t, l), v);
            log_q += q.prob(t, l, v).ln();
        }
        let wq = log_q.exp();
        if wq == 0.0 {
            continue;
        }
        let p = oracle.probability_of(&ev)?;
        // The action nodes carry θ, so this is θ(A) p(evidence | A).
        let log_joint = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        acc += wq * (log_joint - log_q);
    }
    Ok(acc)
}

/// The collapsed bound is at least the mean-field ELBO of any completion
/// that shares its action factors.
pub fn collapsed_tightness(sizes: Sizes) -> CheckOutcome {
    const NAME: &str = "collapsed bound dominates mean field";
    let run = || -> dbnplan_core::Result<(f64, f64, usize)> {
        let (mut worst, mut tightest) = (f64::INFINITY, f64::INFINITY);
        let instances = sizes.models.min(10);
        for seed in 0..instances as u64 {
            let dbn = mfvi_instance(500 + seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_policy(&dbn.action_cards(), dbn.lookahead, &mut rng);
            let collapsed = collapsed_objective(&dbn, &q)?;
            let mf = MeanField::new(&dbn);
            for _ in 0..sizes.completions {
                let mut phi = VariationalPosterior::init(&dbn);
                for id in dbn.latent_nodes() {
                    match dbn.node(id).kind {
                        NodeKind::Action { var, t } => phi.set_dist(id, &q.dist(t, var)),
                        _ => {
                            let p = rng.gen_range(EPSILON..1.0 - EPSILON);
                            phi.set_dist(id, &[1.0 - p, p]);
                        }
                    }
                }
                worst = worst.min(collapsed - mf.elbo(&phi));
            }
            // The best completion for these action factors.
            let mut phi = VariationalPosterior::init(&dbn);
            for id in dbn.latent_nodes() {
                if let NodeKind::Action { var, t } = dbn.node(id).kind {
                    phi.set_dist(id, &q.dist(t, var));
                }
            }
            let free: Vec<usize> = dbn
                .latent_nodes()
                .filter(|&id| !matches!(dbn.node(id).kind, NodeKind::Action { .. }))
                .collect();
            for _ in 0..200 {
                for &id in &free {
                    mf.update(&mut phi, id);
                }
            }
            let gap = collapsed - mf.elbo(&phi);
            worst = worst.min(gap);
            tightest = tightest.min(gap);
        }
        Ok((worst, tightest, instances))
    };
    match run() {
        Ok((w, tight, n)) => CheckOutcome::new(
            NAME,
            w >= -1e-9,
            format!(
                "{n} networks x {} random completions plus one optimized each, min (collapsed - mean field) = {w:.3e} (limit -1e-9), smallest gap at an optimized completion = {tight:.3e}",
                sizes.completions
            ),
        ),
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// Start bit `s ~ Bernoulli(0.95)`, one binary action, reward `s ∧ a`,
/// horizon 1: with the action clamped to 1 the success probability is 0.95.
pub fn two_variable_model() -> FactoredMdp {
    FactoredMdp::new(
        "two-variable",
        vec![StateVar { name: "s".into() }],
        vec![ActionVar::binary("a")],
        vec![Cpt {
            parents: vec![ParentRef::State(0)],
            probs: vec![0.0, 1.0],
        }],
        vec![RewardFactor {
            name: "both".into(),
            parents: vec![ParentRef::State(0), ParentRef::Action(0)],
            values: vec![0.0, 0.0, 0.0, 1.0],
        }],
        vec![0.95],
        1,
    )
    .expect("valid model")
}

/// Mean estimation error of `log g` over `seeds` runs for each `M2`.
pub fn log_g_bias(m2s: &[usize], seeds: usize) -> dbnplan_core::Result<(f64, Vec<f64>)> {
    let mdp = two_variable_model();
    let dbn = unroll(&mdp, &StartState::from_mdp(&mdp), 1, EvidenceMode::Terminal)?;
    let mut ev = BTreeMap::new();
    ev.insert(dbn.action_node(0, 0), 1);
    let oracle = ExactOracle::new(&dbn);
    let truth = oracle.joint_with(&[dbn.terminal_node()], &ev)?;
    let truth = (truth.table[1] / truth.total()).ln();
    let sampler = TrajectorySampler::new(&dbn);
    let q = PolicyParams::uniform(&[2], 1);
    let target = Some(Target { t: 0, l: 0, value: 1 });
    let biases = m2s
        .iter()
        .map(|&m2| {
            let cfg = CsviConfig { m2, ..Default::default() };
            let mean = (0..seeds as u64)
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    estimate_log_g(&sampler, &q, target, &cfg, &mut rng)
                })
                .sum::<f64>()
                / seeds as f64;
            mean - truth
        })
        .collect();
    Ok((truth, biases))
}

pub fn csvi_consistency(sizes: Sizes) -> CheckOutcome {
    const NAME: &str = "collapsed estimator consistency";
    let m2s = [10, 50, 200, 1000];
    match log_g_bias(&m2s, sizes.bias_seeds) {
        Ok((truth, b)) => {
            let mono = b.windows(2).all(|w| w[1].abs() < w[0].abs());
            let shown: Vec<String> = m2s.iter().zip(&b).map(|(m, x)| format!("M2={m}: {x:+.2e}")).collect();
            CheckOutcome::new(
                NAME,
                mono,
                format!("log g = {truth:.6}, mean bias over {} seeds: {}; |bias| strictly decreasing = {mono}", sizes.bias_seeds, shown.join(", ")),
            )
        }
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// Criteria 1 to 6 in order.
pub fn invariant_suite(sizes: Sizes) -> Vec<CheckOutcome> {
    vec![
        reward_chain_identities(sizes),
        bp_tree_exactness(sizes),
        forward_gradient(sizes),
        mfvi_coordinate_ascent(sizes),
        collapsed_tightness(sizes),
        csvi_consistency(sizes),
    ]
}
