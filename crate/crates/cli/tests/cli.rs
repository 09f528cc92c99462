use std::path::Path;
use std::process::{Command, Output};

fn cyclefit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclefit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CYCLEFIT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const SMALL: &[&str] = &[
    "--task",
    "x_squared",
    "--n",
    "400",
    "--epochs",
    "5",
    "--hidden",
    "8,8",
    "--lipschitz-pairs",
    "200",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", out]);
    args.extend_from_slice(extra);
    cyclefit(&args, dir)
}

#[test]
fn gen_data_is_byte_identical_and_unknown_task_lists_ids() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = cyclefit(&["gen-data", "--task", "x_squared", "--n", "1000", "--seed", "7", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["x_squared_n1000_seed7.csv", "x_squared_n1000_seed7.manifest.json"] {
        assert_eq!(read(tmp.path().join("a").join(f)), read(tmp.path().join("b").join(f)));
    }
    let o = cyclefit(&["gen-data", "--task", "spring", "--n", "10", "--out", "s"], tmp.path());
    assert!(o.status.success());
    let text = String::from_utf8(read(tmp.path().join("s/spring_n10_seed0.csv"))).unwrap();
    assert_eq!(text.lines().next().unwrap(), "k,m,f");

    let o = cyclefit(&["gen-data", "--task", "bogus"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("x_squared") && err.contains("spring"), "{err}");
}

#[test]
fn env_var_sets_default_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cyclefit"))
        .args(["gen-data", "--task", "sin", "--n", "5"])
        .current_dir(tmp.path())
        .env("CYCLEFIT_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("from_env/sin_n5_seed0.csv").exists());
}

#[test]
fn train_and_eval_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["r1", "r2"] {
        let o = train(tmp.path(), out, &["--strategy", "ucm_hybrid", "--dropout", "true"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["checkpoint.json", "epochs.csv", "report.csv", "report.json", "config.json"] {
        assert_eq!(read(tmp.path().join("r1").join(f)), read(tmp.path().join("r2").join(f)), "{f}");
    }

    // The resolved snapshot alone reproduces the run.
    let o = cyclefit(&["train", "--config", "r1/config.json", "--out", "r3"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(tmp.path().join("r1/report.csv")), read(tmp.path().join("r3/report.csv")));

    for _ in 0..2 {
        let o = cyclefit(&["eval", "--checkpoint", "r1/checkpoint.json", "--plot"], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report = String::from_utf8(read(tmp.path().join("r1/eval_report.csv"))).unwrap();
    let trained = String::from_utf8(read(tmp.path().join("r1/report.csv"))).unwrap();
    let header: Vec<&str> = report.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    let trow: Vec<&str> = trained.lines().nth(1).unwrap().split(',').collect();
    for name in ["forward_error", "backward_error", "relative_ratio", "backward_truth"] {
        assert_eq!(row[col(name)], trow[col(name)], "{name}");
    }
    let ratio: f64 = row[col("relative_ratio")].parse().unwrap();
    let f: f64 = row[col("forward_error")].parse().unwrap();
    let b: f64 = row[col("backward_error")].parse().unwrap();
    assert_eq!(ratio, b / f);
    for svg in ["forward.svg", "backward.svg"] {
        assert!(String::from_utf8(read(tmp.path().join("r1").join(svg))).unwrap().starts_with("<svg"));
    }
}

#[test]
fn eval_on_external_csv_and_width_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(train(tmp.path(), "r", &["--strategy", "baseline"]).status.success());
    assert!(cyclefit(&["gen-data", "--task", "x_squared", "--n", "50", "--out", "d"], tmp.path()).status.success());
    let o = cyclefit(
        &["eval", "--checkpoint", "r/checkpoint.json", "--data", "d/x_squared_n50_seed0.csv", "--out", "e"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("e/eval_report.json").exists());

    assert!(cyclefit(&["gen-data", "--task", "spring", "--n", "50", "--out", "d"], tmp.path()).status.success());
    let o = cyclefit(
        &["eval", "--checkpoint", "r/checkpoint.json", "--data", "d/spring_n50_seed0.csv"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));

    let o = cyclefit(&["eval", "--checkpoint", "missing.json"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn config_errors_fail_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in [
        &["--batch-fraction", "0.6"][..],
        &["--batch-fraction", "0.01"],
        &["--alpha-f", "0.5"],
        &["--beta-b", "1.2"],
        &["--split", "0.5,0.5,0.5"],
    ] {
        let o = train(tmp.path(), "bad", bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
    }
    assert!(!tmp.path().join("bad").exists());

    std::fs::write(tmp.path().join("c.json"), r#"{"data": {"kind": "synthetic", "task": "sin", "n": 50}, "seeds": [0], "surprise": 1}"#).unwrap();
    let o = cyclefit(&["train", "--config", "c.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("surprise"));
}

#[test]
fn large_batch_is_flagged_and_divergence_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), "big", &["--strategy", "jcm", "--batch-fraction", "0.45"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8(read(tmp.path().join("big/report.csv"))).unwrap();
    assert!(report.lines().nth(1).unwrap().contains(",true,"), "{report}");

    let o = train(tmp.path(), "div", &["--optimizer", "sgd", "--lr", "1e200", "--keep-best", "false"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8(read(tmp.path().join("div/report.csv"))).unwrap();
    assert!(report.contains("diverged"));
    assert!(tmp.path().join("div/epochs.csv").exists());
}

#[test]
fn sweep_writes_rows_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--strategies", "baseline,ucm,jcm", "--seed", "1,2", "--out", "s"]);
    let o = cyclefit(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = String::from_utf8(read(tmp.path().join("s/runs.csv"))).unwrap();
    assert_eq!(runs.lines().count(), 1 + 3 * 2);
    let table = String::from_utf8(read(tmp.path().join("s/comparison.csv"))).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "task,direction,baseline,ucm,jcm");
    assert_eq!(lines.len(), 3);

    let mut args = vec!["sweep"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", "empty"]);
    std::fs::write(
        tmp.path().join("sw.json"),
        r#"{"base": {"data": {"kind": "synthetic", "task": "sin", "n": 50}, "seeds": [0]}, "grid": {"strategies": []}}"#,
    )
    .unwrap();
    let o = cyclefit(&["sweep", "--sweep-config", "sw.json", "--out", "empty"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("empty").exists());
}

#[test]
fn stability_exit_codes_and_checkpoint_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cyclefit(&["stability", "--systems", "50", "--out", "ok"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("ok/trajectories/system_0049.csv").exists());

    let o = cyclefit(&["stability", "--systems", "5", "--lipschitz", "0.99", "--delta-max", "5", "--out", "loose"], tmp.path());
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("not met"));

    let o = cyclefit(&["stability", "--lipschitz", "1.0"], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    assert!(train(tmp.path(), "r", &[]).status.success());
    let o = cyclefit(&["stability", "--from-checkpoint", "r/checkpoint.json", "--out", "lip"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Ψ∘Φ"));
    assert!(tmp.path().join("lip/lipschitz.json").exists());
}
