//! Black-box tests of the command-line interface: exit codes, artifact
//! layout, and snapshot-based reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_eat-lab")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().unwrap()
}

fn tiny_train_args(out: &str) -> Vec<String> {
    [
        "train",
        "--data.kind", "gaussians",
        "--data.n_classes", "2",
        "--data.d", "4",
        "--data.separation", "4.0",
        "--data.n_per_class", "40",
        "--data.seed", "7",
        "--train.scheme", "eat",
        "--train.epochs", "2",
        "--train.batch_size", "16",
        "--train.seed", "7",
        "--attack.eps_linf", "0.02",
        "--attack.eps_l2", "0.1",
        "--attack.eps_l1", "0.3",
        "--attack.steps", "5",
        "--attack.restarts", "1",
        "--out", out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn unknown_subcommand_is_a_config_error() {
    let out = Command::new(bin()).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("frobnicate"), "stderr should name the bad subcommand: {err}");
}

#[test]
fn unknown_key_is_named_and_nothing_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(bin())
        .args(["geometry", "--eps1", "1.5", "--epsinf", "1.0", "--d", "2"])
        .args(["--bogus.knob", "1", "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus.knob"), "stderr should name the offending key: {err}");
    assert!(!out_dir.exists(), "config errors must not leave artifacts behind");
}

#[test]
fn missing_checkpoint_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args([
            "eval",
            "--data.kind", "rings",
            "--data.n_per_class", "10",
            "--eval.checkpoint", "/nonexistent/model.ckpt",
            "--attack.eps_linf", "0.01",
            "--out", dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn geometry_reports_the_radii_and_checks_its_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args(["geometry", "--eps1", "1.5", "--epsinf", "1.0", "--d", "2"])
        .args(["--oracle", "--check", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("geometry.txt")).unwrap();
    assert!(text.contains("union 1.1180"), "geometry.txt:\n{text}");
    assert!(text.contains("oracle_union"), "geometry.txt:\n{text}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout, text, "stdout must mirror geometry.txt");
}

#[test]
fn snapshot_rerun_reproduces_artifacts_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = tiny_train_args(first.to_str().unwrap());
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = run_in(dir.path(), &argrefs);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["run.cfg", "report.csv", "telemetry.csv", "model.ckpt"] {
        assert!(first.join(name).exists(), "missing artifact {name}");
    }

    // The snapshot alone must reproduce the run exactly.
    let second = dir.path().join("second");
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--config",
            first.join("run.cfg").to_str().unwrap(),
            "--out",
            second.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["report.csv", "telemetry.csv", "model.ckpt", "run.cfg"] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs under snapshot rerun");
    }

    let report = std::fs::read_to_string(first.join("report.csv")).unwrap();
    assert!(report.starts_with("model,clean,acc_linf,acc_l2,acc_l1,average,union,n_points,seed\n"));
}

#[test]
fn finetune_and_curve_consume_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = tiny_train_args(first.to_str().unwrap());
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(run_in(dir.path(), &argrefs).status.code(), Some(0));
    let ckpt: PathBuf = first.join("model.ckpt");

    let ft_dir = dir.path().join("ft");
    let out = run_in(
        dir.path(),
        &[
            "finetune",
            "--config", first.join("run.cfg").to_str().unwrap(),
            "--train.checkpoint", ckpt.to_str().unwrap(),
            "--train.epochs", "1",
            "--out", ft_dir.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ft_dir.join("model.ckpt").exists());

    let curve_dir = dir.path().join("curve");
    let out = run_in(
        dir.path(),
        &[
            "curve",
            "--config", first.join("run.cfg").to_str().unwrap(),
            "--eval.checkpoint", ckpt.to_str().unwrap(),
            "--eval.p", "l2",
            "--eval.eps_max", "0.5",
            "--eval.n_points", "6",
            "--check",
            "--out", curve_dir.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(curve_dir.join("curve.csv")).unwrap();
    assert!(curve.starts_with("p,eps,robust_acc\n"), "curve.csv:\n{curve}");
    let accs: Vec<f64> = curve
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(accs.windows(2).all(|w| w[1] <= w[0]), "curve not non-increasing: {accs:?}");
}

#[test]
fn env_seed_matches_an_explicit_seed() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = tiny_train_args(first.to_str().unwrap());
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(run_in(dir.path(), &argrefs).status.code(), Some(0));
    let ckpt = first.join("model.ckpt");

    let eval_args = |out_dir: &Path, seed: Option<&str>| {
        let mut v: Vec<String> = [
            "eval",
            "--data.kind", "gaussians",
            "--data.n_classes", "2",
            "--data.d", "4",
            "--data.separation", "4.0",
            "--data.n_per_class", "40",
            "--data.seed", "7",
            "--eval.checkpoint", ckpt.to_str().unwrap(),
            "--attack.eps_linf", "0.02",
            "--attack.eps_l2", "0.1",
            "--attack.eps_l1", "0.3",
            "--attack.steps", "5",
            "--attack.restarts", "1",
            "--out", out_dir.to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>();
        if let Some(s) = seed {
            v.push("--attack.seed".into());
            v.push(s.into());
        }
        v
    };

    let explicit_dir = dir.path().join("explicit");
    let args = eval_args(&explicit_dir, Some("5"));
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(run_in(dir.path(), &argrefs).status.code(), Some(0));

    let env_dir = dir.path().join("env");
    let args = eval_args(&env_dir, None);
    let out = Command::new(bin())
        .current_dir(dir.path())
        .env("EAT_LAB_SEED", "5")
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let a = std::fs::read(explicit_dir.join("report.csv")).unwrap();
    let b = std::fs::read(env_dir.join("report.csv")).unwrap();
    assert_eq!(a, b, "EAT_LAB_SEED should behave exactly like --attack.seed");
}
