//! Black-box command-line behaviour: exit codes, the structured error
//! contract on stderr, and basic artifact output.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hopmsim"))
}

fn error_json(stderr: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(stderr);
    serde_json::from_str(text.trim())
        .unwrap_or_else(|e| panic!("stderr is not an error JSON ({e}): {text}"))
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let out = bin().arg("--help").output().expect("run");
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["simulate", "demod", "fit", "sweep", "report", "selftest"] {
        assert!(text.contains(sub), "--help does not mention `{sub}`");
    }
}

#[test]
fn missing_fit_input_is_a_user_error() {
    let out = bin().args(["fit", "/nonexistent/spectrum.csv"]).output().expect("run");
    assert_eq!(out.status.code(), Some(1), "want exit 1, stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v = error_json(&out.stderr);
    assert_eq!(v["error"]["kind"], "user");
    assert!(!v["error"]["message"].as_str().unwrap_or("").is_empty());
}

#[test]
fn malformed_env_override_is_a_user_error() {
    let out = bin()
        .env("HOPMSIM_PHYSICAL__B_DC", "banana")
        .args(["simulate", "--duration", "0.001"])
        .output()
        .expect("run");
    assert_eq!(out.status.code(), Some(1));
    let v = error_json(&out.stderr);
    assert_eq!(v["error"]["kind"], "user");
    let msg = v["error"]["message"].as_str().unwrap_or("");
    assert!(msg.contains("b_dc") || msg.contains("B_DC"), "message does not name the key: {msg}");
}

#[test]
fn unknown_config_key_is_a_user_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[physical]\nb_dcc = 1e-6\n").expect("write");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "simulate", "--duration", "0.001"])
        .output()
        .expect("run");
    assert_eq!(out.status.code(), Some(1));
    let v = error_json(&out.stderr);
    assert_eq!(v["error"]["kind"], "user");
}

#[test]
fn simulate_writes_a_trajectory() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = bin()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "simulate",
            "--duration",
            "0.01",
            "--every",
            "64",
        ])
        .output()
        .expect("run");
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let traj = dir.path().join("trajectory.csv");
    let text = std::fs::read_to_string(&traj).expect("trajectory.csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_s,f_x,f_y,f_z,det_uv"));
    assert!(lines.count() >= 10, "trajectory has too few samples");
}
