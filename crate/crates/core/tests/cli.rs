use std::process::Command;

fn bilevel(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bilevel")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn estimate_prints_ep_gradient() {
    let (code, out, _) = bilevel(&["estimate", "--problem", "p1", "--theta", "2", "--method", "ep", "--beta", "0.1", "--points", "2"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["grad"][0].as_f64().unwrap() - 1.818182).abs() < 1e-6);
    assert_eq!(v["method"], "ep");
}

#[test]
fn unknown_config_key_is_a_config_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"problem": {"name": "quad", "n_phi": 4, "bogus": 1}}"#).unwrap();
    let (code, _, err) = bilevel(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("problem") && err.contains("bogus"), "{err}");

    std::fs::write(&path, r#"{"problem": {"name": "p1"}, "solver": {"grad_tol": -1}}"#).unwrap();
    assert_eq!(bilevel(&["train", "--config", path.to_str().unwrap()]).0, 2);
    assert_eq!(bilevel(&["train", "--config", "/nonexistent/run.json"]).0, 2);
}

#[test]
fn numerical_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    // unit curvature with step 3 diverges in the first inner solve
    std::fs::write(&path, r#"{"problem": {"name": "p1"}, "solver": {"step_size": 3.0}, "outer": {"outer_steps": 2}}"#).unwrap();
    let (code, _, err) = bilevel(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 3);
    assert!(err.contains("outer step 0"), "{err}");
}

#[test]
fn train_writes_trajectory_and_materialized_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"problem": {"name": "p1"}, "estimator": {"method": "oracle"}, "theta0": [2.0], "outer": {"outer_lr": 0.4, "outer_steps": 30}}"#).unwrap();
    let out = dir.path().join("out");
    let (code, _, _) = bilevel(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("step,outer_loss,grad_norm,inner_iters,phase2_iters,hvp_count\n"));
    assert_eq!(csv.lines().count(), 31);
    let state: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("final_state.json")).unwrap()).unwrap();
    assert!(state["theta"][0].as_f64().unwrap().abs() <= 1e-3);
    assert_eq!(state["config"]["solver"]["max_iters"], 100000);
    assert_eq!(state["config"]["outer"]["warm_start"], true);
}

#[test]
fn sweep_and_scaling_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, err) = bilevel(&["sweep-beta", "--problem", "quad", "--beta-points", "5", "--seeds", "3", "--bound", "--out", out]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(dir.path().join("sweep_beta.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,beta,delta,delta_prime,seed,grad_error,bound_value,status");
    assert_eq!(csv.lines().count(), 1 + 15);
    assert!(dir.path().join("constants.json").exists());

    let (code, stdout, err) = bilevel(&["delta-scaling", "--problem", "quad", "--method", "cg", "--seeds", "4", "--out", out]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!((v["slope"].as_f64().unwrap() - 1.0).abs() < 0.1);
}

#[test]
fn check_fails_above_tolerance() {
    assert_eq!(bilevel(&["check", "--problem", "pcn", "--seed", "1"]).0, 0);
    assert_eq!(bilevel(&["check", "--problem", "ridge", "--tol", "0"]).0, 1);
}
