//! End-to-end runs of the command-line binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use storyviz::checkpoint::{file_sha256, Checkpoint};
use storyviz::metrics::EvalReport;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storyviz"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = "pretrain.steps = 40\npretrain.batch = 8\nsteps = 4\nbatch = 4\nsample_every = 2\n";

fn small_data(dir: &Path) {
    let o = run(
        &["make-data", "--out", "data", "--train-seeds", "0..30", "--test-seeds", "30..40", "--size", "32"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(dir.join("small.cfg"), SMALL).unwrap();
}

#[test]
fn make_data_counts_determinism_and_overlap() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = run(&["make-data", "--out", "a", "--train-seeds", "0..100", "--test-seeds", "100..120", "--size", "16"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("100 train and 20 test"));
    let o = run(&["make-data", "--out", "b", "--train-seeds", "0..100", "--test-seeds", "100..120", "--size", "16"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&d.join("a")), tree(&d.join("b")));
    let o = run(&["make-data", "--out", "c", "--train-seeds", "0..100", "--test-seeds", "90..120"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("overlap"));
    assert!(!d.join("c").exists());
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&run(&["no-such-command"], d)), 2);
    assert_eq!(code(&run(&["gradcheck", "--module", "nope"], d)), 2);
    let o = run(&["pretrain-encoder", "--data", "missing", "--out", "e.dyns"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no dataset"), "{}", stderr(&o));
    small_data(d);
    fs::write(d.join("typo.cfg"), "pretrain.stesp = 3\n").unwrap();
    let o = run(&["pretrain-encoder", "--data", "data", "--config", "typo.cfg", "--out", "e.dyns"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pretrain.stesp"), "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--module", "dynamic_block", "--seed", "4"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["gradcheck", "--module", "attention", "--inject-fault"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("self_attention"));
}

#[test]
fn pretrain_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    let o = run(&["pretrain-encoder", "--data", "data", "--config", "small.cfg", "--out", "enc.dyns"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("margin"));
    let o = run(&["pretrain-encoder", "--data", "data", "--config", "small.cfg", "--out", "enc2.dyns"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(file_sha256(&d.join("enc.dyns")).unwrap(), file_sha256(&d.join("enc2.dyns")).unwrap());

    let o = run(&["train", "--data", "data", "--encoder", "enc.dyns", "--config", "small.cfg", "--out", "run"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(d.join("run/samples_step2.ppm").exists() && d.join("run/samples_step4.ppm").exists());
    let ck = Checkpoint::load(&d.join("run/checkpoint.dyns")).unwrap();
    assert_eq!(ck.step, 4);
    assert!(ck.config.contains("steps = 4"));

    let o = run(&["eval", "--data", "data", "--ckpt", "run/checkpoint.dyns", "--report", "report.json"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert!(r.fid > 0.0 && r.fsd > 0.0 && r.cosine.is_finite());
    assert_eq!((r.n_real, r.n_fake), (50, 50));
    assert!(r.warning.is_some());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for k in ["fid", "fsd", "cosine", "n_real", "n_fake", "extractor_seed", "caveat"] {
        assert!(v.get(k).is_some(), "report lacks {k}");
    }
}

#[test]
fn ablation_changes_parameter_count_and_nan_aborts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    let o = run(&["pretrain-encoder", "--data", "data", "--config", "small.cfg", "--out", "enc.dyns"], d);
    assert_eq!(code(&o), 0);
    let count = |ablation: &str| {
        fs::write(d.join("a.cfg"), format!("{SMALL}ablation = {ablation}\nsteps = 1\n").replace("steps = 4\n", "")).unwrap();
        let o = run(&["train", "--data", "data", "--encoder", "enc.dyns", "--config", "a.cfg", "--out", ablation], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let out = String::from_utf8_lossy(&o.stdout).into_owned();
        out.lines().find(|l| l.starts_with("ablation")).unwrap().to_string()
    };
    let full = count("full");
    let none = count("no_block");
    assert_ne!(full, none);

    fs::write(d.join("nan.cfg"), "steps = 5\nbatch = 4\nlr = 1e30\nsample_every = 0\n").unwrap();
    let o = run(&["train", "--data", "data", "--encoder", "enc.dyns", "--config", "nan.cfg", "--out", "nan"], d);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("nan_dump.txt"));
    assert!(d.join("nan/nan_dump.txt").exists());
}
