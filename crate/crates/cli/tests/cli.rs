use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
seed = 11

[mesh]
dim = 1
n = 16

[problem]
p = 3.0

[control]
scheme = "identity"

[regularization]
epsilon = 1e-3
k = 8.0

[kernel]
id = "gaussian"
sigma = 0.2
"#;

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_anisopt"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_state_writes_fields_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["solve-state"], BASE);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let state = fs::read_to_string(out.join("state.csv")).unwrap();
    assert!(state.starts_with("vertex_id,x,value\n"));
    assert_eq!(state.lines().count(), 18);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["invariants_passed"], true);
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn low_exponent_is_rejected_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["solve-state", "--set", "problem.p=1.5"], BASE);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("2 ≤ p < ∞"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn duplicate_key_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("n = 16", "n = 16\nn = 32");
    let o = run(dir.path(), &["solve-state"], &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 7"), "{}", stderr(&o));
}

#[test]
fn unknown_and_missing_keys_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["solve-state"], &format!("{BASE}\n[solver]\ntolerance = 1e-8\n"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tolerance"), "{}", stderr(&o));

    let o = run(dir.path(), &["solve-state"], &BASE.replace("[regularization]\nepsilon = 1e-3\nk = 8.0\n", ""));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`regularization`"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn inequality_battery_passes_with_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["check-inequalities"], "seed = 3\n");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/inequalities.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn default_sweep_has_six_steps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["sweep"], BASE);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/sweep.json")).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), 6);
}

#[test]
fn repeated_runs_give_identical_csvs() {
    let args = [
        "optimize",
        "--set",
        "control.scheme=constant-diagonal",
        "--set",
        "optimize.theta0=[0.8, 0.8]",
        "--set",
        "optimize.target_theta=[1.5, 1.5]",
        "--set",
        "optimize.budget=30",
    ];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = run(d.path(), &args, BASE);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["trace.csv", "state.csv", "z.csv", "control.csv"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn coupled_solve_reports_kernel_condition() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["solve-hammerstein"], BASE);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert!((manifest["condition_value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(manifest["invariants"]["hammerstein_unique"], true);
}
