use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const STATE_PREP: &str = r#"{
  "model": { "name": "decay_homodyne", "params": { "gamma": 1.0, "u_max": 5.0, "levels": 11 }, "rho0": [0, 0, 1] },
  "cost": { "running_base": [[1, 0], [0, 0]], "control_penalty": 0.01, "terminal": [[1, 0], [0, 0]] },
  "run": { "T": 1.0, "dt": 0.002, "n_traj": 400, "seed": 3 },
  "bellman": { "grid_n": 21, "time_steps": 100 }
}"#;

fn qsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsep"))
        .args(args)
        .env_remove("QSEP_JOBS")
        .output()
        .expect("binary runs")
}

fn setup(text: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn run_ok(args: &[&str]) -> Output {
    let out = qsep(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file except the manifest, keyed by relative path.
fn payload(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_writes_outputs_and_manifest() {
    let (dir, cfg) = setup(STATE_PREP);
    let out = dir.path().join("sim");
    run_ok(&["simulate", s(&cfg), "--out", s(&out), "--save", "3"]);
    let ens = json(&out.join("ensemble.json"));
    assert_eq!(ens["n_traj"], 400);
    assert!(ens["min_eigenvalue"].as_f64().unwrap() >= -1e-12);
    let rows = fs::read_to_string(out.join("trajectories/trajectory_00002.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 501);
    assert!(!out.join("trajectories/trajectory_00003.csv").exists());

    let m = json(&out.join("run_manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["exit_code"], 0);
    let files = m["outputs"].as_array().unwrap();
    assert_eq!(files.len(), 4);
    for f in files {
        let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(
            f["sha256"].as_str().unwrap(),
            hex::encode(Sha256::digest(&bytes))
        );
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let out = qsep(&["simulate", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));

    let (dir, cfg) = setup(STATE_PREP);
    let o = dir.path().join("o");
    for (set, field) in [
        ("model.params.gamma=-1", "gamma"),
        ("run.dt=0", "run.dt"),
        ("bellman.grid_n=4", "bellman.grid_n"),
    ] {
        let out = qsep(&["simulate", s(&cfg), "--set", set, "--out", s(&o)]);
        assert_eq!(out.status.code(), Some(2), "{set}");
        assert!(
            String::from_utf8_lossy(&out.stderr).contains(field),
            "{set}"
        );
    }
    for args in [
        vec!["simulate", s(&cfg), "--set", "nokey"],
        vec!["simulate", s(&cfg), "--strategy", "wobble", "--out", s(&o)],
        vec!["verify", s(&cfg), "--check", "everything"],
        vec!["frobnicate"],
    ] {
        assert_eq!(qsep(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn overrides_apply_before_validation_and_change_the_hash() {
    let (dir, cfg) = setup(STATE_PREP);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&[
        "simulate",
        s(&cfg),
        "--out",
        s(&a),
        "--set",
        "run.n_traj=20",
    ]);
    run_ok(&[
        "simulate",
        s(&cfg),
        "--out",
        s(&b),
        "--set",
        "run.n_traj=20",
        "--set",
        "run.dt=1e-3",
        "--seed",
        "11",
    ]);
    let (ma, mb) = (
        json(&a.join("run_manifest.json")),
        json(&b.join("run_manifest.json")),
    );
    assert_ne!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(mb["seed"], 11);
    assert_eq!(json(&b.join("ensemble.json"))["dt"], 1e-3);
}

#[test]
fn outputs_are_byte_reproducible() {
    let (dir, cfg) = setup(STATE_PREP);
    let o = |n: &str| dir.path().join(n);
    run_ok(&["simulate", s(&cfg), "--out", s(&o("s1"))]);
    run_ok(&["--jobs", "1", "simulate", s(&cfg), "--out", s(&o("s2"))]);
    assert_eq!(payload(&o("s1")), payload(&o("s2")));
    run_ok(&["bellman", s(&cfg), "--out", s(&o("b1"))]);
    run_ok(&["bellman", s(&cfg), "--out", s(&o("b2"))]);
    assert_eq!(payload(&o("b1")), payload(&o("b2")));
    let m1 = json(&o("b1").join("run_manifest.json"));
    let m2 = json(&o("b2").join("run_manifest.json"));
    assert_eq!(m1["outputs"], m2["outputs"]);
    assert_eq!(m1["config_hash"], m2["config_hash"]);
}

#[test]
fn verify_lindblad_matches_decay_and_flags_coarse_steps() {
    let (dir, cfg) = setup(STATE_PREP);
    let o = dir.path().join("v");
    run_ok(&[
        "verify",
        s(&cfg),
        "--check",
        "lindblad",
        "--set",
        "run.dt=1e-3",
        "--out",
        s(&o),
    ]);
    let r = json(&o.join("verify_lindblad.json"));
    assert_eq!(r["pass"], true);
    let p = r["details"]["excited_population"].as_f64().unwrap();
    assert!((p - (-1f64).exp()).abs() < 1e-8);
    assert!(o.join("lindblad.csv").exists());

    let out = qsep(&[
        "verify",
        s(&cfg),
        "--check",
        "lindblad",
        "--set",
        "run.dt=0.1",
        "--out",
        s(&o),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("lindblad.step_halving"));
}

#[test]
fn verify_ks_on_frozen_dynamics_is_exact() {
    let (dir, cfg) =
        setup(r#"{ "model": { "name": "custom", "custom": { "l0": [[0, 0], [0, 0]] } } }"#);
    let o = dir.path().join("v");
    run_ok(&[
        "verify",
        s(&cfg),
        "--check",
        "ks",
        "--strategy",
        "zero",
        "--seeds",
        "3",
        "--out",
        s(&o),
    ]);
    let r = json(&o.join("verify_ks.json"));
    assert!(r["details"]["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|v| v.as_array().unwrap())
        .all(|d| d == 0.0));
}

#[test]
fn verify_oracle_and_innovations_pass() {
    let (dir, cfg) = setup(STATE_PREP);
    let o = dir.path().join("v");
    run_ok(&[
        "verify",
        s(&cfg),
        "--check",
        "oracle",
        "--set",
        "run.dt=1e-2",
        "--out",
        s(&o),
    ]);
    assert!(
        json(&o.join("verify_oracle.json"))["details"]["ratio"]
            .as_f64()
            .unwrap()
            <= 0.6
    );
    run_ok(&[
        "verify",
        s(&cfg),
        "--check",
        "innovations",
        "--set",
        "run.n_traj=2000",
        "--out",
        s(&o),
    ]);
    assert_eq!(
        json(&o.join("verify_innovations.json"))["details"]
            .as_array()
            .unwrap()
            .len(),
        6
    );
}

#[test]
fn zero_cost_value_function_is_zero() {
    let (dir, cfg) = setup(
        r#"{ "model": { "name": "decay_homodyne" }, "bellman": { "grid_n": 5, "time_steps": 4 } }"#,
    );
    let o = dir.path().join("b");
    run_ok(&["bellman", s(&cfg), "--out", s(&o)]);
    let values = fs::read_to_string(o.join("values.csv")).unwrap();
    let mut lines = values.lines();
    assert!(lines.next().unwrap().starts_with("node,x,y,z,v0"));
    let mut count = 0;
    for line in lines {
        for v in line.split(',').skip(4) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0);
            count += 1;
        }
    }
    assert_eq!(count, 125 * 2);
}

#[test]
fn compare_with_a_panel_of_one_has_one_row() {
    let (dir, cfg) = setup(STATE_PREP);
    let o = dir.path().join("c");
    run_ok(&["compare", s(&cfg), "--panel", "zero", "--out", s(&o)]);
    let r = json(&o.join("comparison.json"));
    assert_eq!(r["strategies"].as_array().unwrap().len(), 1);
    assert_eq!(r["ranking"], serde_json::json!(["zero"]));
    assert_eq!(
        fs::read_to_string(o.join("costs.csv"))
            .unwrap()
            .lines()
            .next(),
        Some("trajectory,zero")
    );
}

#[test]
fn separated_policy_wins_and_reloads() {
    let (dir, cfg) = setup(STATE_PREP);
    let (b, c, d) = (
        dir.path().join("b"),
        dir.path().join("c"),
        dir.path().join("d"),
    );
    run_ok(&["bellman", s(&cfg), "--out", s(&b)]);
    run_ok(&["compare", s(&cfg), "--out", s(&c)]);
    let r = json(&c.join("comparison.json"));
    assert_eq!(r["ranking"][0], "separated");
    assert_eq!(r["strategies"].as_array().unwrap().len(), 6);
    assert_eq!(r["value_consistency"]["pass_total"], true);

    // A reloaded value function yields the same separated costs.
    run_ok(&[
        "compare",
        s(&cfg),
        "--panel",
        "separated",
        "--value-function",
        s(&b),
        "--out",
        s(&d),
    ]);
    let col = |p: &Path, k: usize| -> Vec<String> {
        fs::read_to_string(p.join("costs.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').nth(k).unwrap().to_string())
            .collect()
    };
    let header: Vec<String> = fs::read_to_string(c.join("costs.csv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split(',')
        .map(String::from)
        .collect();
    let k = header.iter().position(|h| h == "separated").unwrap();
    assert_eq!(col(&c, k), col(&d, 1));
}

#[test]
fn separated_simulation_needs_a_value_function() {
    let (dir, cfg) = setup(STATE_PREP);
    let (b, o) = (dir.path().join("b"), dir.path().join("o"));
    assert_eq!(
        qsep(&[
            "simulate",
            s(&cfg),
            "--strategy",
            "separated",
            "--out",
            s(&o)
        ])
        .status
        .code(),
        Some(2)
    );
    run_ok(&["bellman", s(&cfg), "--out", s(&b)]);
    run_ok(&[
        "simulate",
        s(&cfg),
        "--strategy",
        "separated",
        "--value-function",
        s(&b),
        "--out",
        s(&o),
    ]);
    assert_eq!(json(&o.join("ensemble.json"))["strategy"], "separated");
}
