//! Grid execution and CSV output.

use std::fs::File;
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;

use dbnplan_core::domain::load_domain;
use dbnplan_core::FactoredMdp;

use crate::episode::{env_seed, planner_seed, run_episode, EpisodeTrace};
use crate::manifest::{AlgorithmEntry, Manifest};
use crate::planners::{build_planner, Planner};
use crate::score::{score, ScoreRecord};

/// Every float in the CSV output: 17 significant digits, round-trippable.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub struct Episode {
    pub instance: usize,
    pub algo: String,
    pub sim: usize,
    pub trace: EpisodeTrace,
}

pub struct ExperimentResults {
    pub manifest: Manifest,
    pub seed: u64,
    pub models: Vec<FactoredMdp>,
    /// In grid order: instance, algorithm (manifest order), simulation.
    pub episodes: Vec<Episode>,
    pub scores: Vec<ScoreRecord>,
}

impl ExperimentResults {
    pub fn returns(&self, instance: &str, algo: &str) -> Vec<f64> {
        let idx = self.manifest.domains.iter().position(|d| d.name == instance);
        self.episodes
            .iter()
            .filter(|e| Some(e.instance) == idx && e.algo == algo)
            .map(|e| e.trace.total_return())
            .collect()
    }

    pub fn score_of(&self, instance: &str, algo: &str) -> Option<&ScoreRecord> {
        self.scores.iter().find(|s| s.instance == instance && s.algo == algo)
    }
}

/// Runs every (instance, algorithm, simulation) cell of the manifest on
/// `jobs` threads (0 = all cores). The output depends only on the manifest
/// and `seed`.
pub fn run_grid(manifest: &Manifest, seed: u64, jobs: usize) -> anyhow::Result<ExperimentResults> {
    manifest.validate()?;
    let planners: Vec<Box<dyn Planner>> = manifest
        .algorithms
        .iter()
        .map(|a| build_planner(&a.id, a.config.as_ref()))
        .collect::<anyhow::Result<_>>()?;
    let models = manifest
        .domains
        .iter()
        .map(|d| load_domain(&d.source).with_context(|| format!("loading domain {:?}", d.name)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let has_random = planners.iter().any(|p| p.id() == "random");
    let baseline = build_planner("random", None)?;

    let mut cells = Vec::new();
    for inst in 0..models.len() {
        for (a, _) in planners.iter().enumerate() {
            for sim in 0..manifest.episode.simulations {
                cells.push((inst, Some(a), sim));
            }
        }
        if !has_random {
            for sim in 0..manifest.episode.simulations {
                cells.push((inst, None, sim));
            }
        }
    }
    let cfg = manifest.episode;
    let run = || -> Vec<Episode> {
        cells
            .par_iter()
            .map(|&(inst, a, sim)| {
                let planner = a.map_or(baseline.as_ref(), |a| planners[a].as_ref());
                let trace = run_episode(
                    &models[inst],
                    planner,
                    &cfg,
                    env_seed(seed, inst, sim),
                    planner_seed(seed, inst, planner.id(), sim),
                );
                Episode {
                    instance: inst,
                    algo: planner.id().to_string(),
                    sim,
                    trace,
                }
            })
            .collect()
    };
    let all = if jobs == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?.install(run)
    };
    let (baselines, episodes): (Vec<Episode>, Vec<Episode>) = all
        .into_iter()
        .partition(|e| !has_random && e.algo == "random");

    let mut scores = Vec::new();
    for (inst, d) in manifest.domains.iter().enumerate() {
        let rets = |algo: &str, from: &[Episode]| -> Vec<f64> {
            from.iter()
                .filter(|e| e.instance == inst && e.algo == algo)
                .map(|e| e.trace.total_return())
                .collect()
        };
        let base = if has_random { rets("random", &episodes) } else { rets("random", &baselines) };
        for p in &planners {
            scores.push(score(&models[inst].name, &d.name, p.id(), &rets(p.id(), &episodes), &base));
        }
    }

    let mut locked = manifest.clone();
    locked.seed = Some(seed);
    locked.version = Some(env!("CARGO_PKG_VERSION").to_string());
    locked.algorithms = planners
        .iter()
        .map(|p| AlgorithmEntry {
            id: p.id().to_string(),
            config: Some(p.config()).filter(|t| !t.is_empty()),
        })
        .collect();
    Ok(ExperimentResults {
        manifest: locked,
        seed,
        models,
        episodes,
        scores,
    })
}

pub const RESULTS_HEADER: [&str; 11] = [
    "domain",
    "instance",
    "algo",
    "sim",
    "step",
    "lookahead",
    "action",
    "reward",
    "cum_reward",
    "diag_iterations",
    "diag_score",
];

pub const SCORES_HEADER: [&str; 8] = [
    "domain",
    "instance",
    "algo",
    "mean",
    "std",
    "score_paper",
    "score_signed",
    "score_std",
];

pub const ELBO_HEADER: [&str; 5] = ["run_id", "sweep", "group", "node", "delta"];

/// Writes results.csv, scores.csv, elbo_trace.csv (when any variational
/// planner ran) and manifest.lock into `out`.
///
/// Each ELBO run contributes its coordinate updates, its M-steps (group
/// `policy`) and two marker rows, `elbo-start` and `elbo-end`, whose delta
/// column holds the ELBO itself.
pub fn write_outputs(res: &ExperimentResults, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut results = csv::Writer::from_writer(File::create(out.join("results.csv"))?);
    results.write_record(RESULTS_HEADER)?;
    let mut elbo_rows: Vec<[String; 5]> = Vec::new();
    for e in &res.episodes {
        let mdp = &res.models[e.instance];
        let inst = &res.manifest.domains[e.instance].name;
        for (step, s) in e.trace.steps.iter().enumerate() {
            results.write_record([
                mdp.name.clone(),
                inst.clone(),
                e.algo.clone(),
                e.sim.to_string(),
                step.to_string(),
                s.lookahead.to_string(),
                mdp.action_label(&s.action),
                fmt_f64(s.reward),
                fmt_f64(s.cum_reward),
                s.iterations.to_string(),
                fmt_f64(s.score),
            ])?;
            if let Some(tr) = &s.elbo {
                let run_id = format!("{inst}/{}/{}/{step}", e.algo, e.sim);
                let row = |sweep: String, group: &str, node: String, delta: f64| {
                    [run_id.clone(), sweep, group.to_string(), node, fmt_f64(delta)]
                };
                elbo_rows.push(row(String::new(), "elbo-start", String::new(), tr.start));
                for d in &tr.updates {
                    elbo_rows.push(row(d.sweep.to_string(), d.group.name(), d.node.to_string(), d.delta));
                }
                for (i, &d) in tr.policy_steps.iter().enumerate() {
                    elbo_rows.push(row(i.to_string(), "policy", String::new(), d));
                }
                elbo_rows.push(row(String::new(), "elbo-end", String::new(), tr.end));
            }
        }
        if let Some((step, msg)) = &e.trace.failure {
            results.write_record([
                mdp.name.clone(),
                inst.clone(),
                e.algo.clone(),
                e.sim.to_string(),
                step.to_string(),
                String::new(),
                format!("error: {msg}"),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
    }
    results.flush()?;

    let mut scores = csv::Writer::from_writer(File::create(out.join("scores.csv"))?);
    scores.write_record(SCORES_HEADER)?;
    for s in &res.scores {
        scores.write_record([
            s.domain.clone(),
            s.instance.clone(),
            s.algo.clone(),
            fmt_f64(s.mean),
            fmt_f64(s.std),
            fmt_opt(s.score_abs),
            fmt_opt(s.score_signed),
            fmt_opt(s.score_std),
        ])?;
    }
    scores.flush()?;

    if !elbo_rows.is_empty() {
        let mut w = csv::Writer::from_writer(File::create(out.join("elbo_trace.csv"))?);
        w.write_record(ELBO_HEADER)?;
        for r in &elbo_rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    std::fs::write(out.join("manifest.lock"), toml::to_string(&res.manifest)?)?;
    Ok(())
}

pub fn run_experiment(manifest: &Manifest, seed: u64, jobs: usize, out: &Path) -> anyhow::Result<ExperimentResults> {
    let res = run_grid(manifest, seed, jobs)?;
    write_outputs(&res, out)?;
    Ok(res)
}
