//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p dbnplan-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use dbnplan_cli::checks::{self, CheckOutcome, Sizes};
use dbnplan_cli::experiment::{run_experiment, write_outputs, ExperimentResults};
use dbnplan_cli::manifest::{AlgorithmEntry, DomainEntry, Manifest};
use dbnplan_cli::score::{mean, std_dev};
use dbnplan_cli::EpisodeConfig;

const SEED: u64 = 0;

fn manifest(domains: &[(&str, &str)], algos: &[&str], episode: EpisodeConfig) -> Manifest {
    Manifest {
        seed: Some(SEED),
        version: None,
        episode,
        domains: domains
            .iter()
            .map(|(name, source)| DomainEntry {
                name: name.to_string(),
                source: source.to_string(),
            })
            .collect(),
        algorithms: algos
            .iter()
            .map(|id| AlgorithmEntry {
                id: id.to_string(),
                config: None,
            })
            .collect(),
    }
}

fn timed(name: &'static str, limit_secs: f64, f: impl FnOnce() -> CheckOutcome) -> CheckOutcome {
    let t = Instant::now();
    let mut o = f();
    let secs = t.elapsed().as_secs_f64();
    o.name = name;
    o.passed &= secs < limit_secs;
    o.detail = format!("{}; {secs:.1} s (limit {limit_secs} s)", o.detail);
    o
}

fn signed(res: &ExperimentResults, inst: &str, algo: &str) -> f64 {
    res.score_of(inst, algo).and_then(|s| s.score_signed).unwrap_or(f64::NAN)
}

fn directional(res: &ExperimentResults) -> CheckOutcome {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut check = |label: String, pass: bool| {
        ok &= pass;
        parts.push(format!("{label} [{}]", if pass { "ok" } else { "no" }));
    };

    // (a) forward beats backward.
    for inst in ["corridor", "chain"] {
        let (f, b) = (mean(&res.returns(inst, "bp-fwd-sogbofa")), mean(&res.returns(inst, "bp-bwd")));
        check(format!("(a) {inst}: sogbofa {f:.2} - bp-bwd {b:.2} = {:.2} >= 0", f - b), f - b >= 0.0);
    }

    // (b) rollout stays put on the corridor whenever it can see past one
    // step; sogbofa goes for the goal.
    let idx = res.manifest.domains.iter().position(|d| d.name == "corridor").expect("corridor");
    let (mut noop, mut total) = (0, 0);
    for e in res.episodes.iter().filter(|e| e.instance == idx && e.algo == "bp-fwd-rollout") {
        for s in e.trace.steps.iter().filter(|s| s.lookahead >= 2) {
            total += 1;
            noop += s.action.iter().all(|&v| v == 0) as usize;
        }
    }
    check(format!("(b) rollout no-op at {noop}/{total} steps with lookahead >= 2"), total > 0 && noop == total);
    let s = signed(res, "corridor", "bp-fwd-sogbofa");
    check(format!("(b) sogbofa signed score {s:.3} > 0"), s > 0.0);

    // (c) on cooking, freezing the states helps and collapsing helps more.
    let m = |a: &str| mean(&res.returns("cooking", a));
    let (fwd, nos, cs) = (m("mfvi-fwd"), m("mfvi-nos"), m("csvi-fwd"));
    check(format!("(c) mfvi-nos {nos:.2} >= mfvi-fwd {fwd:.2}"), nos >= fwd);
    check(format!("(c) csvi-fwd {cs:.2} >= mfvi-fwd {fwd:.2}"), cs >= fwd);

    // (d) competitive with forward BP.
    let (a, b) = (res.returns("cooking", "csvi-fwd"), res.returns("cooking", "bp-fwd-sogbofa"));
    let pooled = ((std_dev(&a).powi(2) + std_dev(&b).powi(2)) / 2.0).sqrt();
    let gap = (mean(&a) - mean(&b)).abs();
    check(format!("(d) |csvi-fwd {:.2} - sogbofa {:.2}| = {gap:.2} <= pooled std {pooled:.2}", mean(&a), mean(&b)), gap <= pooled);

    CheckOutcome {
        name: "directional planning reproduction",
        passed: ok,
        detail: parts.join("; "),
    }
}

/// Per-run reconciliation and per-algorithm state share from elbo_trace.csv.
fn attribution(dir: &Path) -> anyhow::Result<CheckOutcome> {
    #[derive(Default)]
    struct Run {
        start: f64,
        end: f64,
        sum: f64,
    }
    let mut runs: BTreeMap<String, Run> = BTreeMap::new();
    // algo -> (state gain, total update gain)
    let mut gains: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(dir.join("elbo_trace.csv"))?;
    for row in reader.records() {
        let row = row?;
        let (run_id, group, delta) = (&row[0], &row[2], row[4].parse::<f64>()?);
        if !run_id.starts_with("cooking/") {
            continue;
        }
        let algo = run_id.split('/').nth(1).unwrap_or_default().to_string();
        let run = runs.entry(run_id.to_string()).or_default();
        match group {
            "elbo-start" => run.start = delta,
            "elbo-end" => run.end = delta,
            _ => {
                run.sum += delta;
                if group != "policy" {
                    let g = gains.entry(algo).or_default();
                    g.1 += delta;
                    if group == "states" {
                        g.0 += delta;
                    }
                }
            }
        }
    }
    let worst = runs.values().map(|r| (r.end - r.start - r.sum).abs()).fold(0.0f64, f64::max);
    let share = |a: &str| gains.get(a).map_or(f64::NAN, |&(s, t)| if t == 0.0 { 0.0 } else { s / t });
    let (full, nos) = (share("mfvi-fwd"), share("mfvi-nos"));
    Ok(CheckOutcome {
        name: "ELBO attribution",
        passed: !runs.is_empty() && worst <= 1e-6 && full > nos,
        detail: format!(
            "{} cooking runs, max |end - start - sum of deltas| = {worst:.2e} (limit 1e-6), state share full {full:.4} vs NoS {nos:.4}",
            runs.len()
        ),
    })
}

fn determinism(dir: &Path) -> anyhow::Result<CheckOutcome> {
    let episode = EpisodeConfig {
        horizon: 6,
        simulations: 2,
        max_lookahead: 4,
    };
    let algos: Vec<&str> = dbnplan_cli::ALGORITHMS.to_vec();
    let m = manifest(&[("cooking", "builtin:cooking"), ("corridor", "builtin:penalty-corridor")], &algos, episode);
    let (a, b) = (dir.join("first"), dir.join("second"));
    run_experiment(&m, SEED, 0, &a)?;
    run_experiment(&m, SEED, 1, &b)?;
    let (x, y) = (std::fs::read(a.join("results.csv"))?, std::fs::read(b.join("results.csv"))?);
    Ok(CheckOutcome {
        name: "determinism",
        passed: x == y,
        detail: format!(
            "all {} planners on 2 domains, thread pool vs one thread: results.csv {} bytes, identical = {}",
            algos.len(),
            x.len(),
            x == y
        ),
    })
}

fn or_failed(name: &'static str, r: anyhow::Result<CheckOutcome>) -> CheckOutcome {
    r.unwrap_or_else(|e| CheckOutcome {
        name,
        passed: false,
        detail: format!("error: {e:#}"),
    })
}

fn main() -> ExitCode {
    let sizes = Sizes::full();
    let mut outcomes = vec![
        timed("reward chains average their inputs", 10.0, || checks::reward_chain_identities(sizes)),
        checks::bp_tree_exactness(sizes),
        checks::forward_gradient(sizes),
        checks::mfvi_coordinate_ascent(sizes),
        checks::collapsed_tightness(sizes),
        checks::csvi_consistency(sizes),
    ];
    for (i, o) in outcomes.iter().enumerate() {
        println!("criterion {}: {}", i + 1, o.line());
    }

    let tmp = tempfile::tempdir().expect("temp dir");
    let grid = manifest(
        &[
            ("corridor", "builtin:penalty-corridor"),
            ("chain", "builtin:chain-reward"),
            ("cooking", "builtin:cooking"),
        ],
        &["random", "bp-bwd", "bp-fwd-sogbofa", "bp-fwd-rollout", "mfvi-fwd", "mfvi-nos", "csvi-fwd"],
        EpisodeConfig {
            horizon: 20,
            simulations: 12,
            max_lookahead: 9,
        },
    );
    let started = Instant::now();
    let grid_run = dbnplan_cli::run_grid(&grid, SEED, 0).and_then(|res| {
        write_outputs(&res, tmp.path())?;
        Ok(res)
    });
    let grid_secs = started.elapsed().as_secs_f64();
    let c7 = match &grid_run {
        Ok(res) => {
            let mut o = directional(res);
            o.passed &= grid_secs < 1800.0;
            o.detail = format!("{}; grid {grid_secs:.1} s (limit 1800 s)", o.detail);
            o
        }
        Err(e) => CheckOutcome {
            name: "directional planning reproduction",
            passed: false,
            detail: format!("error: {e:#}"),
        },
    };
    let c8 = or_failed("ELBO attribution", grid_run.as_ref().map_err(|e| anyhow::anyhow!("{e:#}")).and_then(|_| attribution(tmp.path())));
    let c9 = or_failed("determinism", determinism(tmp.path()));
    for (i, o) in [c7, c8, c9].into_iter().enumerate() {
        println!("criterion {}: {}", i + 7, o.line());
        outcomes.push(o);
    }

    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
