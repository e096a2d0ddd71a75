use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_eigenclean"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn numbers(out: &Output) -> Vec<f64> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| l.parse().unwrap()).collect()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["gen", "--n", "6", "--t-min", "6", "--t-max", "30", "--count", "200", "--seed", "1", "--out", "train.jsonl"]);
    run(d, &["gen", "--n", "6", "--t-min", "6", "--t-max", "30", "--t-step", "8", "--count", "60", "--seed", "2", "--out", "eval.jsonl"]);
    assert!(d.join("train.jsonl.manifest.json").exists());

    run(d, &[
        "train", "--data", "train.jsonl", "--n", "6", "--hidden", "16,12", "--epochs", "2", "--seed", "3",
        "--out-model", "model.txt",
    ]);
    let history = std::fs::read_to_string(d.join("model.txt.loss.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    run(d, &["eval", "--model", "model.txt", "--data", "eval.jsonl", "--t-grid", "6:30:8", "--out-csv", "eval.csv"]);
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,q,mse_sample,mse_rie,mse_model,count");
    assert!(csv.lines().count() >= 2);

    let cmp = run(d, &["compare", "--model", "model.txt", "--record-index", "0", "--data", "eval.jsonl"]);
    assert_eq!(String::from_utf8_lossy(&cmp.stdout).lines().count(), 7);
    assert!(String::from_utf8_lossy(&cmp.stderr).contains("l2 sample"));

    std::fs::write(d.join("s.txt"), "0.2\n0.5\n0.9\n1.1\n1.3\n2.0\n").unwrap();
    let cleaned = numbers(&run(d, &["clean", "--model", "model.txt", "--spectrum-file", "s.txt", "--t", "12"]));
    assert_eq!(cleaned.len(), 6);
    assert!(cleaned.windows(2).all(|w| w[0] <= w[1]));

    let rie = numbers(&run(d, &["rie", "--spectrum-file", "s.txt", "--n", "6", "--t", "12"]));
    assert!((rie.iter().sum::<f64>() - 6.0).abs() < 1e-9);
    let raw = numbers(&run(d, &["rie", "--spectrum-file", "s.txt", "--n", "6", "--t", "12", "--no-rescale"]));
    assert_eq!(raw.len(), 6);
}

#[test]
fn gen_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| ["gen", "--n", "5", "--t-min", "5", "--t-max", "20", "--count", "40", "--seed", "9", "--out", out];
    run(d, &args("a.jsonl"));
    run(d, &args("b.jsonl"));
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    // Interrupted run: keep 10 records and half a line.
    let cut = a.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(9).unwrap().0 + 20;
    std::fs::write(d.join("b.jsonl"), &a[..cut]).unwrap();
    run(d, &args("b.jsonl"));
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_eigenclean"))
        .current_dir(dir.path())
        .args(["gen", "--n", "10", "--t-min", "5", "--t-max", "20", "--count", "3", "--out", "x.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("t_min"));
    assert!(!dir.path().join("x.jsonl").exists());
}
