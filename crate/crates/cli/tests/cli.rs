use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TRUTH: &str = r#"{
  "mean": {"kind": "constant", "c": 0.0},
  "kernel": {"kind": "squared_exponential", "log_amplitude": 0.0, "log_length_scales": [-1.2, -1.2]},
  "log_noise_variance": -4.6
}"#;

const SMALL_TRAINING: [&str; 8] = [
    "--steps",
    "40",
    "--restarts",
    "1",
    "--means",
    "constant",
    "--kernels",
    "se",
];

fn hyperbo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperbo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hyperbo(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a 5-task study and returns (study, truth sidecar).
fn generate(dir: &Path) -> (String, String) {
    let truth = dir.join("truth.json");
    fs::write(&truth, TRUTH).unwrap();
    let study = dir.join("study.json");
    ok(&[
        "synth-gen",
        "--truth",
        s(&truth),
        "--tasks",
        "5",
        "--points",
        "24",
        "--seed",
        "3",
        "--out",
        s(&study),
    ]);
    let sidecar = dir.join("study.truth.json");
    assert!(sidecar.exists());
    (s(&study).to_string(), s(&sidecar).to_string())
}

#[test]
fn full_offline_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (study, _) = generate(dir.path());
    let params = dir.path().join("prior.json");
    let mut fit = vec![
        "fit",
        "--study",
        &study,
        "--holdout",
        "task-004",
        "--objective",
        "nllkl",
    ];
    fit.extend(["--out", s(&params)]);
    fit.extend(SMALL_TRAINING);
    ok(&fit);
    assert!(fs::read_to_string(&params)
        .unwrap()
        .contains("squared_exponential"));

    let runs = dir.path().join("runs");
    for method in ["h-nll", "rand", "stbo"] {
        let mut args = vec![
            "bo-offline",
            "--study",
            &study,
            "--test-task",
            "task-004",
            "--method",
            method,
            "--iters",
            "6",
            "--seeds",
            "2",
            "--out-dir",
            s(&runs),
        ];
        if method == "h-nll" {
            args.extend(["--prior", s(&params)]);
        }
        let printed = ok(&args);
        assert_eq!(printed.lines().count(), 2);
    }
    let files = fs::read_dir(&runs).unwrap().count();
    assert_eq!(files, 6);
    let header = fs::read_to_string(runs.join("h-nll__task-004__seed0.csv")).unwrap();
    assert!(header.starts_with("iteration,x0,x1,y,raw,best_so_far,regret"));

    let profile = ok(&["report", "profile", "--runs", s(&runs)]);
    assert!(profile.starts_with("iteration,series,value"));
    assert_eq!(profile.lines().count(), 1 + 3 * 6);
    let pct = ok(&["report", "percentiles", "--runs", s(&runs)]);
    assert!(pct.contains("h-nll/p50"));
    let speed = ok(&[
        "report",
        "speedup",
        "--runs",
        s(&runs),
        "--a",
        "h-nll",
        "--b",
        "rand",
    ]);
    assert!(speed.starts_with("task,ratio\ntask-004,"));
    let mut diag = vec![
        "report",
        "diagnostics",
        "--study",
        &study,
        "--holdout",
        "task-004",
        "--params",
        s(&params),
    ];
    diag.extend(SMALL_TRAINING);
    let diag = ok(&diag);
    assert_eq!(diag.lines().count(), 4);
}

#[test]
fn online_run_trains_its_own_prior() {
    let dir = tempfile::tempdir().unwrap();
    let (study, sidecar) = generate(dir.path());
    let runs = dir.path().join("online");
    let mut args = vec![
        "bo-online",
        "--study",
        &study,
        "--truth",
        &sidecar,
        "--test-task",
        "task-000",
        "--method",
        "h-kl",
        "--acq",
        "ucb:1.8",
        "--iters",
        "5",
        "--candidates",
        "200",
        "--max-resolution",
        "1000",
        "--out-dir",
        s(&runs),
    ];
    args.extend(SMALL_TRAINING);
    ok(&args);
    let text = fs::read_to_string(runs.join("h-kl__task-000__seed0.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn same_command_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (study, _) = generate(dir.path());
    let read = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "bo-offline",
            "--study",
            &study,
            "--test-task",
            "task-001",
            "--method",
            "h-nll",
            "--iters",
            "5",
            "--out-dir",
            s(&out),
        ];
        args.extend(SMALL_TRAINING);
        ok(&args);
        fs::read_to_string(out.join("h-nll__task-001__seed0.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let (study, _) = generate(dir.path());
    let missing = hyperbo(&["fit", "--study", "/no/such/file.json", "--out", "x.json"]);
    assert_eq!(missing.status.code(), Some(2));
    let unknown_task = hyperbo(&[
        "bo-offline",
        "--study",
        &study,
        "--test-task",
        "nope",
        "--method",
        "rand",
    ]);
    assert_eq!(unknown_task.status.code(), Some(2));
    let bad_method = hyperbo(&[
        "bo-offline",
        "--study",
        &study,
        "--test-task",
        "task-000",
        "--method",
        "magic",
    ]);
    assert_eq!(bad_method.status.code(), Some(2));
    // 4 training tasks are far too few for the calibrated coefficient
    let zeta = hyperbo(&[
        "bo-offline",
        "--study",
        &study,
        "--test-task",
        "task-000",
        "--method",
        "h-nll",
        "--acq",
        "ucb-theory:0.1",
    ]);
    assert_eq!(zeta.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&zeta.stderr).contains("ln(6/delta)"));

    let threads = Command::new(env!("CARGO_BIN_EXE_hyperbo"))
        .args(["report", "percentiles", "--runs", "."])
        .env("HYPERBO_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let (study, _) = generate(dir.path());
    let prior = dir.path().join("overflow.json");
    // amplitude overflows to infinity, so no covariance can be factored
    fs::write(
        &prior,
        TRUTH.replace("\"log_amplitude\": 0.0", "\"log_amplitude\": 400.0"),
    )
    .unwrap();
    let out = hyperbo(&[
        "bo-offline",
        "--study",
        &study,
        "--test-task",
        "task-000",
        "--method",
        "h-nll",
        "--prior",
        s(&prior),
        "--iters",
        "3",
        "--out-dir",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
