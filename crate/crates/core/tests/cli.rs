use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_effzero");

/// Overrides shrinking the toy profile to a few seconds.
const TINY: &[&str] = &[
    "training_steps=16",
    "env_steps_budget=80",
    "min_replay_size=24",
    "batch_size=8",
    "num_simulations=4",
    "selfplay_envs=2",
    "eval_episodes=2",
    "eval_interval=8",
    "checkpoint_interval=8",
    "lr_decay_steps=12",
    "selfplay_model_interval=4",
    "target_model_interval=8",
];

fn effzero(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--env", "catcher", "--seed", "3", "--out", out.to_str().unwrap()];
    for s in TINY {
        args.extend(["--set", s]);
    }
    args.extend(extra);
    effzero(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_then_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_tiny(&run, &["--save-buffer"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("16 learner steps"), "{}", stdout(&o));
    for f in ["metrics.jsonl", "eval.jsonl", "config.toml", "final.ezck", "buffer.ezck"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("final.ezck");
    let o = effzero(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3", "--random", "-1", "--reference", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["training_step"], 16);
    let mean = v["mean"].as_f64().unwrap();
    assert!((v["normalized_mean"].as_f64().unwrap() - (mean + 1.0) / 2.0).abs() < 1e-12);

    let o = effzero(&[
        "value-error",
        "--buffer",
        run.join("buffer.ezck").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        run.join("config.toml").to_str().unwrap(),
        "--samples",
        "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["with_correction"]["correction"], true);
    assert_eq!(v["without_correction"]["correction"], false);

    let plots = dir.path().join("plots");
    let metrics = run.join("metrics.jsonl");
    let o = effzero(&["plot", "--metrics", metrics.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["returns.svg", "losses.svg", "metrics.csv"] {
        assert!(plots.join(f).exists(), "{f}");
    }
    let svg = std::fs::read_to_string(plots.join("losses.svg")).unwrap();
    assert!(svg.contains("data-label=\"total\"") && svg.contains("data-label=\"consistency\""));
}

#[test]
fn repeated_serial_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_tiny(&a, &[]).status.success());
    assert!(train_tiny(&b, &[]).status.success());
    let read = |p: &Path| std::fs::read(p.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn ablate_records_disabled_switches() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("abl");
    let mut args = vec!["ablate", "--env", "deepsea", "--env-size", "4", "--out", run.to_str().unwrap()];
    for s in TINY {
        args.extend(["--set", s]);
    }
    args.extend(["--disable", "consistency,value-prefix"]);
    let o = effzero(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("use_consistency = false"), "{cfg}");
    assert!(cfg.contains("use_value_prefix = false"));
    assert!(cfg.contains("use_off_policy_correction = true"));
}

#[test]
fn env_server_speaks_line_json() {
    let mut child = Command::new(BIN)
        .args(["env-server", "--env", "deepsea", "--env-size", "4"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"cmd\":\"reset\"}\nnot json\n{\"cmd\":\"step\",\"action\":1}\n{\"cmd\":\"close\"}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> =
        stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["num_actions"], 2);
    assert_eq!(lines[0]["obs"]["shape"], serde_json::json!([1, 4, 4]));
    assert!(lines[1]["error"].is_string());
    assert!((lines[2]["reward"].as_f64().unwrap() + 0.0025).abs() < 1e-12);
}

#[test]
fn eval_runs_over_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &[]).status.success());
    let ckpt = run.join("final.ezck");
    let builtin = effzero(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "4", "--seed", "5"]);
    let server = format!("protocol:{BIN} env-server --env catcher --seed 5");
    let remote = effzero(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "4", "--env", &server]);
    assert!(builtin.status.success() && remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    let parse = |o: &Output| serde_json::from_str::<serde_json::Value>(stdout(o).trim()).unwrap();
    let (b, r) = (parse(&builtin), parse(&remote));
    assert!(b["mean"].is_number() && r["mean"].is_number());
    assert!(r["env"].as_str().unwrap().starts_with("protocol:"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = effzero(&["train", "--env", "pong", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("catcher") && err.contains("deepsea"), "{err}");

    assert_eq!(effzero(&["train", "--set", "no_such_key=3"]).status.code(), Some(1));
    assert_eq!(effzero(&["eval", "--checkpoint", "/nonexistent.ezck"]).status.code(), Some(1));
    assert_eq!(effzero(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(effzero(&["--help"]).status.code(), Some(0));
}
