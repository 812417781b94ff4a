use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

const TINY: [&str; 10] = [
    "--set",
    "data.n_sequences=48",
    "--set",
    "data.length=16",
    "--set",
    "folds.limit=1",
    "--set",
    "eval.max_sequences=12",
    "--set",
    "train.batch_size=8",
];

fn mam(args: &[&str]) -> i32 {
    let mut argv = vec!["mam"];
    argv.extend_from_slice(args);
    mam_cli::run(argv)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        "synthetic:coupled",
        "--out",
        path(out),
        "--epochs",
        "1",
    ];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    assert_eq!(mam(&args), 0);
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn manifest_step(run: &Path) -> u64 {
    let text = fs::read_to_string(run.join("fold_0/checkpoint/manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["step"].as_u64().unwrap()
}

#[test]
fn make_synthetic_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(
            mam(&[
                "make-synthetic",
                "--n-sequences",
                "12",
                "--length",
                "20",
                "--out",
                path(dir)
            ]),
            0
        );
    }
    let fa = files(&a);
    assert!(fa.iter().any(|p| p.ends_with("hidden.bin")));
    assert_eq!(fa.len(), files(&b).len());
    for p in fa {
        let q = b.join(p.strip_prefix(&a).unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{}", p.display());
    }
}

#[test]
fn invalid_system_exits_with_config_code() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(mam(&["make-synthetic", "--system", "bogus", "--out", path(&out)]), 2);
}

#[test]
fn binary_reports_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_mam");
    let status = Command::new(bin)
        .args(["train", "--set", "train.nope=1", "--out"])
        .arg(tmp.path().join("r"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(bin).args(["frobnicate"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(bin)
        .args(["evaluate", "--run"])
        .arg(tmp.path().join("missing"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn train_then_evaluate_writes_reproducible_reports_and_plots() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_tiny(&run, &[]);
    let log = fs::read_to_string(run.join("fold_0/train_log.csv")).unwrap();
    assert!(log.starts_with("step,"));
    assert!(log.lines().count() > 1);

    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    assert_eq!(mam(&["evaluate", "--run", path(&run), "--out", path(&e1)]), 0);
    assert_eq!(mam(&["evaluate", "--run", path(&run), "--out", path(&e2)]), 0);
    let r1 = fs::read(e1.join("reports.csv")).unwrap();
    assert_eq!(r1, fs::read(e2.join("reports.csv")).unwrap());
    assert!(String::from_utf8(r1).unwrap().lines().count() >= 3);
    assert!(fs::read_to_string(e1.join("summary.md")).unwrap().contains("| llma |"));
    for name in ["x_given_y", "y_given_x", "latent_x_pca", "latent_y_pca"] {
        let svg = fs::read_to_string(e1.join(format!("plots/fold_0_{name}.svg"))).unwrap();
        assert!(svg.starts_with("<svg") && svg.len() > 200, "{name}");
    }
}

#[test]
fn resume_continues_the_step_counter() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_tiny(&run, &[]);
    let first = manifest_step(&run);
    assert!(first > 0);
    assert_eq!(mam(&["train", "--resume", path(&run), "--epochs", "1"]), 0);
    assert_eq!(manifest_step(&run), 2 * first);
    let log = fs::read_to_string(run.join("fold_0/train_log.csv")).unwrap();
    let last_step: u64 = log.lines().last().unwrap().split(',').next().unwrap().parse().unwrap();
    assert_eq!(last_step, 2 * first);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_tiny(&run, &[]);
    fs::remove_file(run.join("fold_0/checkpoint/manifest.json")).unwrap();
    assert_eq!(mam(&["evaluate", "--run", path(&run)]), 3);
}

#[test]
fn probe_compares_runs() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_tiny(&a, &[]);
    train_tiny(&b, &["--align", "none"]);
    let out = tmp.path().join("probe");
    assert_eq!(
        mam(&["probe", "--run", path(&a), "--run", path(&b), "--out", path(&out)]),
        0
    );
    let md = fs::read_to_string(out.join("probe.md")).unwrap();
    assert!(md.contains("| llma | X | linear |"));
    assert!(md.contains("| none | Y | nonlinear |"));
    // header plus 2 runs x 2 encoders x 2 probe kinds
    assert_eq!(fs::read_to_string(out.join("probe.csv")).unwrap().lines().count(), 9);
}
