use std::path::Path;
use std::process::{Command, Output};

fn seqskip(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqskip"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = seqskip(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn maa(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("MAA="))
        .expect("an MAA= line")
        .parse()
        .unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn generated_corpus_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--rule", "markov", "--n", "300", "--seed", "7", "--out", "data/"]);
    let files = ["sessions.csv", "features.csv", "schema.toml"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(d.join("data").join(f))).collect();
    assert!(first.iter().all(|b| !b.is_empty()));
    let manifest = String::from_utf8(read(d.join("data/manifest.txt"))).unwrap();
    assert!(manifest.contains("seed=7") && manifest.contains("arg.noise=0") && manifest.contains("version="));

    std::fs::remove_file(d.join("data/sessions.csv")).unwrap();
    ok(d, &["--manifest", "data/manifest.txt"]);
    for (f, before) in files.iter().zip(&first) {
        assert_eq!(&read(d.join("data").join(f)), before, "{f}");
    }
}

#[test]
fn fit_evaluate_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--rule", "threshold", "--n", "300", "--seed", "3", "--out", "data", "--noise", "0.05"]);
    let fit_out = ok(
        d,
        &["--threads", "1", "fit", "--model", "seq1HL", "--width", "8", "--data", "data", "--epochs", "3", "--seed", "1"],
    );
    let log = String::from_utf8(read(d.join("run/epochs.log"))).unwrap();
    assert_eq!(log.lines().count(), 3);
    for (i, line) in log.lines().enumerate() {
        assert!(line.starts_with(&format!("epoch={} train_loss=", i + 1)), "{line}");
        assert!(line.contains(" val_maa=") && line.contains(" lr="));
    }
    assert!(fit_out.contains("best_val_maa="));
    assert!(d.join("run/checkpoint.bin").is_file());

    let eval = ok(d, &["--threads", "1", "evaluate", "--checkpoint", "run/checkpoint.bin", "--data", "data"]);
    let score = maa(&eval);
    assert!((0.0..=1.0).contains(&score));
    let report = String::from_utf8(read(d.join("eval/per_session_aa.csv"))).unwrap();
    let aa: Vec<f64> = report.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(aa.len(), 300);
    assert!((aa.iter().sum::<f64>() / 300.0 - score).abs() < 1e-12);

    ok(d, &["predict", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--out", "pred"]);
    let preds = read(d.join("pred/predictions.txt"));
    let text = String::from_utf8(preds.clone()).unwrap();
    assert_eq!(text.lines().count(), 300);
    assert!(text.lines().all(|l| {
        let (sid, bits) = l.split_once(',').unwrap();
        sid.starts_with("s_") && !bits.is_empty() && bits.bytes().all(|b| b == b'0' || b == b'1')
    }));

    let rescored = ok(d, &["evaluate", "--predictions", "pred/predictions.txt", "--data", "data", "--out", "rescored"]);
    assert_eq!(maa(&rescored), score);

    // Replays: fit to the same MAA, predict to the same bytes.
    ok(d, &["--manifest", "run/manifest.txt"]);
    let again = ok(d, &["--manifest", "eval/manifest.txt"]);
    assert!((maa(&again) - score).abs() <= 1e-9);
    std::fs::remove_file(d.join("pred/predictions.txt")).unwrap();
    ok(d, &["--manifest", "pred/manifest.txt"]);
    assert_eq!(read(d.join("pred/predictions.txt")), preds);
}

#[test]
fn grad_check_reports_the_worst_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check", "--trials", "3", "--out", "gc"]);
    let worst: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("max_rel_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-4);
    assert!(dir.path().join("gc/grad_check.txt").is_file());
    assert!(!seqskip(dir.path(), &["grad-check", "--trials", "2", "--tolerance", "0"]).status.success());
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &[][..],
        &["frobnicate"],
        &["fit", "--bogus"],
        &["gen-data", "--rule", "nope", "--out", "x"],
        &["fit", "--model", "seq9", "--data", "x"],
        &["--manifest", "m.txt", "grad-check"],
        &["evaluate", "--data", "x"],
        &["evaluate", "--data", "x", "--checkpoint", "c", "--predictions", "p"],
    ] {
        let out = seqskip(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(seqskip(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn failures_exit_with_1_and_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["gen-data", "--rule", "markov", "--noise", "0.7", "--out", "x"][..],
        &["fit", "--model", "rnb1", "--data", "missing"],
        &["evaluate", "--checkpoint", "missing.bin", "--data", "missing"],
        &["--manifest", "missing.txt"],
    ] {
        let out = seqskip(d, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: ") && err.contains("missing") || err.contains("noise"), "{err}");
    }
}
