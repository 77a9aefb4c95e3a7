use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_tailsgd");

const SMALL: &str = r#"
seed = 5
replicates = 20
T = 400
gamma_rule = "half_inv_R2"
[distribution]
kind = "gaussian_well_specified"
d = 3
noise_sigma = 1.0
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("valid json")
}

#[test]
fn moments_reports_isserlis_r2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = run(&["moments", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!((v["R2"].as_f64().unwrap() - 5.0).abs() < 1e-12);
    assert!((v["mu"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn solve_cov_methods_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let a = json(&run(&[
        "solve-cov",
        "--config",
        &cfg,
        "--method",
        "fixed-point",
    ]));
    let b = json(&run(&["solve-cov", "--config", &cfg, "--method", "direct"]));
    let ta = a["trace"].as_f64().unwrap();
    let tb = b["trace"].as_f64().unwrap();
    assert!((ta - tb).abs() <= 1e-9 * tb);
    assert!(tb <= b["refined_trace_bound"].as_f64().unwrap());
}

#[test]
fn bound_prints_both_pieces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let v = json(&run(&["bound", "--config", &cfg]));
    let b = &v["bound"];
    let bias = b["bias_term"].as_f64().unwrap();
    let var = b["variance_term"].as_f64().unwrap();
    let total = b["total"].as_f64().unwrap();
    assert!((total - (bias.sqrt() + var.sqrt()).powi(2)).abs() < 1e-15);
    assert!((v["rate_constants"]["gamma"].as_f64().unwrap() - 0.1).abs() < 1e-15);
}

#[test]
fn simulate_is_seed_deterministic_and_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let traj = dir.path().join("traj.csv");
    let out_a = run(&[
        "simulate",
        "--config",
        &cfg,
        "--trajectory",
        traj.to_str().unwrap(),
        "--record-every",
        "50",
    ]);
    assert_eq!(out_a.status.code(), Some(0));
    let out_b = run(&["simulate", "--config", &cfg, "--workers", "3"]);
    assert_eq!(out_a.stdout, out_b.stdout);
    let text = fs::read_to_string(&traj).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,excess_risk,dist_sq");
    assert_eq!(text.lines().count(), 1 + 8);
    let v = json(&out_a);
    let se = v["risk"]["stderr"].as_f64().unwrap();
    let half = v["risk"]["ci_high"].as_f64().unwrap() - v["risk"]["mean"].as_f64().unwrap();
    assert!((half - 1.96 * se).abs() < 1e-15);
    let other_seed = run(&["simulate", "--config", &cfg, "--seed", "6"]);
    assert_ne!(out_a.stdout, other_seed.stdout);
}

#[test]
fn verify_passes_on_a_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out_path = dir.path().join("v.csv");
    let out = run(&[
        "verify",
        "--config",
        &cfg,
        "--replicates",
        "200",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    let table = fs::read_to_string(&out_path).unwrap();
    assert_eq!(out.status.code(), Some(0), "{table}");
    assert!(table.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn sweep_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write(
        dir.path(),
        "g.toml",
        r#"
        seed = 9
        replicates = 10
        [grid]
        d = [1, 2]
        gamma_rule = ["half_inv_R2"]
        T = [100]
        family = ["well_specified", "misspecified"]
        "#,
    );
    let a = run(&["sweep", "--config", &grid, "--workers", "1"]);
    let b = run(&["sweep", "--config", &grid, "--workers", "4"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("cell_id,d,gamma,rho,T,t,replicates,seed,emp_risk,stderr,bound,bias_bound,var_bound,eff_ratio,error\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn exit_code_two_for_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        &SMALL.replace("T = 400", "T = \"many\""),
    );
    assert_eq!(run(&["bound", "--config", &bad]).status.code(), Some(2));
    let big = write(
        dir.path(),
        "big.toml",
        &SMALL.replace(
            "gamma_rule = \"half_inv_R2\"",
            "gamma_rule = \"explicit\"\ngamma = 0.3",
        ),
    );
    let out = run(&["bound", "--config", &big]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepsize"));
    assert_eq!(
        run(&["moments", "--config", "/nonexistent.toml"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["moments"]).status.code(), Some(2));
}

#[test]
fn verify_rejects_families_without_closed_form_moments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sat.toml",
        r#"
        T = 100
        replicates = 4
        [distribution]
        kind = "gaussian_misspecified"
        d = 2
        noise_sigma = 1.0
        misspec_fn = "saturating_norm"
        "#,
    );
    let out = run(&["verify", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("closed form"));
}
