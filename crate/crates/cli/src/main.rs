use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use dbnplan_cli::checks::{invariant_suite, Sizes};
use dbnplan_cli::{run_experiment, Manifest};
use dbnplan_core::domain::load_domain;
use dbnplan_core::exact::exact_summary;
use dbnplan_core::{EvidenceMode, PolicyParams, StartState};

#[derive(Parser)]
#[command(name = "plan", version, about = "Planning as inference in factored MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Terminal,
    Exponentiated,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (domain, algorithm, simulation) cell of a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Print exact quantities for a uniform policy as JSON.
    Oracle {
        /// `builtin:<name>` or a domain file.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        horizon: usize,
        #[arg(long, value_enum, default_value_t = Mode::Terminal)]
        mode: Mode,
    },
    /// Run the invariant suite on small instances.
    Check {
        /// Use the full acceptance sizes.
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run {
            manifest,
            out,
            seed,
            jobs,
        } => {
            let m = Manifest::load(&manifest)?;
            let seed = seed.or(m.seed).unwrap_or(0);
            let res = run_experiment(&m, seed, jobs, &out)?;
            let failed = res.episodes.iter().filter(|e| e.trace.failure.is_some()).count();
            eprintln!("{} episodes written to {}", res.episodes.len(), out.display());
            if failed > 0 {
                eprintln!("{failed} episodes stopped on a planner error");
            }
            Ok(true)
        }
        Command::Oracle { domain, horizon, mode } => {
            let mdp = load_domain(&domain).with_context(|| format!("loading {domain}"))?;
            let mode = match mode {
                Mode::Terminal => EvidenceMode::Terminal,
                Mode::Exponentiated => EvidenceMode::Exponentiated,
            };
            let theta = PolicyParams::uniform(&mdp.action_cards(), horizon);
            let summary = exact_summary(&mdp, &StartState::from_mdp(&mdp), &theta, mode)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Check { full } => {
            let outcomes = invariant_suite(if full { Sizes::full() } else { Sizes::quick() });
            for o in &outcomes {
                println!("{}", o.line());
            }
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}
