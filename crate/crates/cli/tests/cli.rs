use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
# small enough to train in well under a second
phase1_epochs = 2
phase2_epochs = 3
batch_size = 16
train_pairs = 200
eval_pairs = 50
probe_epochs = 20
seg_epochs = 3
";

fn semise(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semise"))
        .args(args)
        .current_dir(dir)
        .env_remove("SEMISE_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = semise(
        dir.path(),
        &["generate", "--out", "d.sevd", "--classes", "5", "--per-class", "20", "--size", "16", "--seed", "3"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn train(dir: &Path, ckpt: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "tiny.cfg", "--data", "d.sevd", "--out-checkpoint", ckpt];
    args.extend_from_slice(extra);
    semise(dir, &args)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn generate_counts_and_reproducibility() {
    let dir = setup();
    let o = semise(
        dir.path(),
        &["generate", "--out", "e.sevd", "--classes", "5", "--per-class", "10", "--size", "16", "--seed", "3"],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("wrote 50 records"));
    let o = semise(dir.path(), &["inspect", "e.sevd"]);
    assert!(stdout(&o).contains("[10, 10, 10, 10, 10]"), "{}", stdout(&o));

    let again = semise(
        dir.path(),
        &["generate", "--out", "d2.sevd", "--classes", "5", "--per-class", "20", "--size", "16", "--seed", "3"],
    );
    assert_eq!(code(&again), 0);
    assert_eq!(read(dir.path(), "d.sevd"), read(dir.path(), "d2.sevd"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--out", "env.sevd", "--classes", "3", "--per-class", "4", "--size", "8"];
    let o = Command::new(env!("CARGO_BIN_EXE_semise"))
        .args(args)
        .current_dir(dir.path())
        .env("SEMISE_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = semise(
        dir.path(),
        &["generate", "--out", "flag.sevd", "--classes", "3", "--per-class", "4", "--size", "8", "--seed", "11"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(read(dir.path(), "env.sevd"), read(dir.path(), "flag.sevd"));
    let m: Value = serde_json::from_slice(&read(dir.path(), "env.sevd.manifest.json")).unwrap();
    assert_eq!(m["seed"], 11);
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    assert_eq!(code(&semise(dir.path(), &["generate", "--classes", "5"])), 2);
    assert_eq!(code(&semise(dir.path(), &["frobnicate"])), 2);
    let o = semise(
        dir.path(),
        &["eval", "--checkpoint", "c", "--data", "d.sevd", "--task", "bogus", "--out", "m"],
    );
    assert_eq!(code(&o), 2);
    let o = semise(dir.path(), &["sweep", "--data", "d.sevd", "--alphas", "0:1", "--out", "s.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alpha spec"));
}

#[test]
fn invalid_config_rejected_before_training() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.cfg"), "phase1_epochs = 1\nalpha = 1.5\n").unwrap();
    let o = semise(dir.path(), &["train", "--config", "bad.cfg", "--data", "d.sevd", "--out-checkpoint", "c.smse"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alpha"));
    assert!(!dir.path().join("c.smse").exists());

    std::fs::write(dir.path().join("typo.cfg"), "alpha = 0.5\n\nbatch_sise = 8\n").unwrap();
    let o = semise(dir.path(), &["train", "--config", "typo.cfg", "--data", "d.sevd", "--out-checkpoint", "c.smse"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = train(dir.path(), "c.smse", &["--alpha", "-0.1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_data_is_runtime_error() {
    let dir = setup();
    let o = semise(dir.path(), &["train", "--data", "nope.sevd", "--out-checkpoint", "c.smse"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.sevd"));
    std::fs::write(dir.path().join("junk.bin"), b"not a file format").unwrap();
    assert_eq!(code(&semise(dir.path(), &["inspect", "junk.bin"])), 1);
}

#[test]
fn train_is_deterministic_and_manifest_is_complete() {
    let dir = setup();
    let d = dir.path();
    let o = train(d, "a.smse", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(read(d, "a.smse.losses.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("phase,epoch,loss_total,loss_ntxent,loss_pro"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r.split(',').skip(2).all(|v| v.parse::<f64>().unwrap().is_finite()), "{r}");
    }
    assert!(!csv.contains('\r'));

    assert_eq!(code(&train(d, "b.smse", &[])), 0);
    assert_eq!(read(d, "a.smse"), read(d, "b.smse"));
    assert_eq!(read(d, "a.smse.losses.csv"), read(d, "b.smse.losses.csv"));

    let m: Value = serde_json::from_slice(&read(d, "a.smse.manifest.json")).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["exit_status"], 0);
    assert_eq!(m["config"]["phase2_epochs"], "3");
    assert_eq!(m["config_path"], "tiny.cfg");
    for out in m["outputs"].as_array().unwrap() {
        assert!(d.join(out.as_str().unwrap()).exists());
    }

    // Replaying the recorded argv into a fresh directory reproduces the outputs.
    let replay = tempfile::tempdir().unwrap();
    for f in ["d.sevd", "tiny.cfg"] {
        std::fs::copy(d.join(f), replay.path().join(f)).unwrap();
    }
    let argv: Vec<String> = m["argv"].as_array().unwrap()[1..]
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    assert_eq!(code(&semise(replay.path(), &argv)), 0);
    assert_eq!(read(d, "a.smse"), read(replay.path(), "a.smse"));
}

#[test]
fn flags_override_config_file() {
    let dir = setup();
    let o = train(dir.path(), "c.smse", &["--seed", "5", "--set", "phase2_epochs=1", "--alpha", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: Value = serde_json::from_slice(&read(dir.path(), "c.smse.manifest.json")).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["phase2_epochs"], "1");
    assert_eq!(m["config"]["alpha"], "1");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&train(d, "full.smse", &[])), 0);
    let o = train(d, "part.smse", &["--max-epochs", "3"]);
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).contains("complete"));
    let o = semise(d, &["train", "--resume", "part.smse", "--data", "d.sevd", "--out-checkpoint", "resumed.smse"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(d, "full.smse"), read(d, "resumed.smse"));
    assert_eq!(read(d, "full.smse.losses.csv"), read(d, "resumed.smse.losses.csv"));
}

#[test]
fn eval_tasks_write_reports() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&train(d, "c.smse", &[])), 0);

    let o = semise(
        d,
        &["eval", "--checkpoint", "c.smse", "--data", "d.sevd", "--task", "classify", "--out", "cls", "--on", "train"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&read(d, "cls.json")).unwrap();
    assert_eq!(report["task"], "classify");
    let f1 = report["metrics"]["f1_macro"].as_f64().unwrap();
    assert!(f1 > 0.4, "F1 {f1} not above chance");
    let csv = String::from_utf8(read(d, "cls.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "config_hash,alpha,f1_macro,recall_macro,maee,iou,dice,spearman");

    let o = semise(d, &["eval", "--checkpoint", "c.smse", "--data", "d.sevd", "--task", "ordering", "--out", "ord"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("spearman = "));

    let o = semise(d, &["eval", "--checkpoint", "c.smse", "--data", "d.sevd", "--task", "segment", "--out", "seg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&read(d, "seg.json")).unwrap();
    let (iou, dice) = (
        report["metrics"]["iou"].as_f64().unwrap(),
        report["metrics"]["dice"].as_f64().unwrap(),
    );
    assert!((0.0..=1.0).contains(&iou) && dice >= iou);

    let m: Value = serde_json::from_slice(&read(d, "seg.manifest.json")).unwrap();
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_rows_sorted_by_alpha() {
    let dir = setup();
    let d = dir.path();
    let o = semise(
        d,
        &["sweep", "--config", "tiny.cfg", "--data", "d.sevd", "--alphas", "1,0,0.5", "--out", "sweep.csv"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(read(d, "sweep.csv")).unwrap();
    let alphas: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(alphas, ["0", "0.5", "1"]);
    assert_eq!(csv.lines().next().unwrap(), "alpha,f1_macro,maee,recall_macro,config_hash");
}

#[test]
fn selfcheck_passes_and_detects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let o = semise(dir.path(), &["selfcheck", "--instances", "10"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for loss in ["margin_contrastive_loss", "nt_xent_loss", "preference_loss", "combined_loss"] {
        assert!(out.contains(loss), "{loss} missing");
    }

    let o = semise(dir.path(), &["selfcheck", "--instances", "10", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("conv2d"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL") && l.contains("conv2d")));
}
