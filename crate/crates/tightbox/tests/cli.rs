use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tightbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tightbox")).args(args).output().expect("spawn tightbox")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn gen_small(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    fs::write(&spec, r#"{"n_train": 3, "n_val": 2, "height": 24, "width": 24, "radius": [5.0, 8.0]}"#).unwrap();
    let data = dir.join("data");
    ok(&tightbox(&["gen-data", "--spec", s(&spec), "--seed", "3", "--out", s(&data)]));
    data
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    assert!(data.join("manifest.json").exists());

    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": "direct-logit",
            "bags": {"scheme": "generalized", "angles": {"theta1": -40, "theta2": 40, "step": 20}},
            "loss": {"bag_reduce": "alpha-softmax", "alpha": 6},
            "optim": {"lr": 0.05, "iterations": 60}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&tightbox(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]));
    for f in ["config.json", "config_echo.json", "checkpoint.json", "runlog.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("runlog.csv")).unwrap();
    assert!(log.starts_with("iteration,total_loss,unary_c1,pairwise_c1,wall_ms"));
    assert_eq!(log.lines().count(), 61);

    ok(&tightbox(&["eval", "--run", s(&run), "--data", s(&data)]));
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    let row = report.lines().find(|l| !l.starts_with('#') && !l.starts_with("method")).unwrap();
    let dice: f64 = row.rsplit(',').nth(2).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&dice), "{row}");
    assert_eq!(fs::read_to_string(run.join("per_sample.csv")).unwrap().lines().filter(|l| l.starts_with("val_")).count(), 2);
}

#[test]
fn dump_bags_writes_one_file_per_angle_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let out = dir.path().join("bags");
    ok(&tightbox(&["dump-bags", "--data", s(&data), "--angles", "-30:30:30", "--out", s(&out)]));
    let n = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(n, 3 * 5);
}

#[test]
fn selftest_passes() {
    let out = tightbox(&["selftest", "--instances", "3", "--vectors", "300"]);
    ok(&out);
}

#[test]
fn bad_angles_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let out = tightbox(&["dump-bags", "--data", s(&data), "--angles", "30:-30:10", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = tightbox(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tightbox(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let out = tightbox(&["--help"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("dump-bags"));
}
