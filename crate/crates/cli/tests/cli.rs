use std::path::Path;
use std::process::{Command, Output};

fn ediff(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ediff"))
        .args(args)
        .env("EDIFF_OUT", out_root)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["eval", "--help"], &["experiment", "--help"]] {
        let o = ediff(args, tmp.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"));
    }
}

#[test]
fn unknown_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ediff(&["train", "learning_rate=0.1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn unknown_experiment_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ediff(&["experiment", "name=nope"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn experiment_outputs_repeat_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |dir: &str| {
        vec![
            "experiment".to_string(),
            "name=branch_vs_baseline".into(),
            "iters=40".into(),
            "n_samples=64".into(),
            "n_eval=256".into(),
            "n_steps=8".into(),
            "--width".into(),
            "16".into(),
            format!("out={}", tmp.path().join(dir).display()),
        ]
    };
    for dir in ["a", "b"] {
        let a = args(dir);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        let o = ediff(&refs, tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["branch_vs_baseline.csv", "branch_vs_baseline_sw.csv", "metrics.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let manifest = std::fs::read_to_string(tmp.path().join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("# command: experiment"));
    assert!(manifest.contains("iters=40"));
    assert!(manifest.contains("width=16"));
}

#[test]
fn train_then_sample_and_eval_from_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ediff(&["train", "iters=5", "width=8"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("train-seed7");
    let ckpt = run.join("0,0.ema.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("manifest.txt").exists());
    let ckpt_arg = format!("ckpt={}", ckpt.display());
    let o = ediff(
        &["sample", &ckpt_arg, "n_samples=10", "n_steps=4", "width=8"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let samples = std::fs::read_to_string(tmp.path().join("sample-seed7/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 11);
    let o = ediff(
        &[
            "eval",
            &ckpt_arg,
            "n_samples=10",
            "n_eval=50",
            "n_steps=4",
            "n_projections=4",
            "width=8",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(tmp.path().join("eval-seed7/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}
