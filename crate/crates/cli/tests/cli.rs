use std::path::Path;
use std::process::{Command, Output};

fn plan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plan")).args(args).output().unwrap()
}

fn write_manifest(dir: &Path, body: &str) -> String {
    let path = dir.join("grid.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const GRID: &str = r#"
seed = 11

[episode]
horizon = 4
simulations = 2
max_lookahead = 3

[[domain]]
name = "cook"
source = "builtin:cooking"

[[domain]]
name = "lawn"
source = "sprinkler.dom"

[[algorithm]]
id = "bp-fwd-rollout"

[[algorithm]]
id = "mfvi-fwd"
config = { max_sweeps = 20 }
"#;

fn sprinkler() -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../domains/sprinkler.dom")).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sprinkler.dom"), sprinkler()).unwrap();
    let manifest = write_manifest(dir.path(), GRID);
    let out = dir.path().join("out");
    let o = plan(&["run", "--manifest", &manifest, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // 2 domains x 2 algorithms x 2 sims x 4 steps, plus the implicit
    // random baseline, which is scored against but not written.
    let results = csv_rows(&out.join("results.csv"));
    assert_eq!(results.len(), 32);
    let scores = csv_rows(&out.join("scores.csv"));
    assert_eq!(scores.len(), 4);
    assert!(csv_rows(&out.join("elbo_trace.csv")).iter().all(|r| r[0].contains("mfvi-fwd")));

    let lock = std::fs::read_to_string(out.join("manifest.lock")).unwrap();
    assert!(lock.contains("seed = 11"), "{lock}");
    assert!(lock.contains("stop_tol"), "resolved defaults are locked: {lock}");
}

#[test]
fn lock_file_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sprinkler.dom"), sprinkler()).unwrap();
    let manifest = write_manifest(dir.path(), GRID);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(plan(&["run", "--manifest", &manifest, "--out", a.to_str().unwrap(), "--jobs", "2"]).status.success());
    let lock = a.join("manifest.lock");
    let o = plan(&["run", "--manifest", lock.to_str().unwrap(), "--out", b.to_str().unwrap(), "--jobs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "scores.csv", "elbo_trace.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sprinkler.dom"), sprinkler()).unwrap();
    let manifest = write_manifest(dir.path(), &GRID.replace("bp-fwd-rollout", "random"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    plan(&["run", "--manifest", &manifest, "--out", a.to_str().unwrap()]);
    plan(&["run", "--manifest", &manifest, "--out", b.to_str().unwrap(), "--seed", "12"]);
    assert_ne!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
    assert!(std::fs::read_to_string(b.join("manifest.lock")).unwrap().contains("seed = 12"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let unknown = write_manifest(dir.path(), &GRID.replace("mfvi-fwd", "mfvi-med"));
    let o = plan(&["run", "--manifest", &unknown, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown algorithm id"));

    // sprinkler.dom is not copied next to this manifest.
    let missing = write_manifest(dir.path(), GRID);
    let o = plan(&["run", "--manifest", &missing, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lawn"));
}

#[test]
fn oracle_prints_exact_quantities() {
    let o = plan(&["oracle", "--domain", "builtin:independent-arms", "--horizon", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ct = v["expected_ct"].as_f64().unwrap();
    let log_z = v["log_evidence"].as_f64().unwrap();
    assert!((ct.ln() - log_z).abs() < 1e-12);
    assert_eq!(v["action_posterior"].as_array().unwrap().len(), 2);
}

#[test]
fn quick_check_passes() {
    let o = plan(&["check"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn every_registered_planner_gets_a_score_row() {
    let algos: String = dbnplan_cli::ALGORITHMS.iter().map(|id| format!("[[algorithm]]\nid = \"{id}\"\n")).collect();
    let body = format!(
        "[episode]\nhorizon = 2\nsimulations = 1\n[[domain]]\nname = \"a\"\nsource = \"builtin:independent-arms\"\n[[domain]]\nname = \"b\"\nsource = \"builtin:chain-reward-2\"\n{algos}"
    );
    let m = dbnplan_cli::Manifest::parse(&body).unwrap();
    let res = dbnplan_cli::run_grid(&m, 3, 1).unwrap();
    for inst in ["a", "b"] {
        let rows = res.scores.iter().filter(|s| s.instance == inst).count();
        assert_eq!(rows, dbnplan_cli::ALGORITHMS.len(), "{inst}");
    }
}
