//! The `g2sf` binary end to end: stage chain, exit codes, stale-upstream
//! detection, configuration precedence and ingestion of external data.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

use g2sf::features::{gen_synthetic_dataset, write_split, Split, SynthConfig};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn g2sf(args: &[&str]) -> Out {
    let out = Command::new(env!("CARGO_BIN_EXE_g2sf")).args(args).output().expect("binary runs");
    Out {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Out {
    let o = g2sf(args);
    assert_eq!(o.code, 0, "g2sf {args:?}\nstdout: {}\nstderr: {}", o.stdout, o.stderr);
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Small but complete chain; `extra` goes to every stage.
fn chain(run: &str, extra: &[&str]) {
    let with = |base: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let go = |base: &[&str]| {
        let args = with(base);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    };
    go(&["gen", "--out", run, "--n-train", "12", "--n-test", "10"]);
    go(&["bank", "--run", run]);
    go(&["synth", "--run", run, "--n-aug", "8"]);
    go(&["train", "--run", run, "--epochs", "2"]);
    go(&["score", "--run", run]);
    go(&["eval", "--run", run]);
}

#[test]
fn full_chain_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    chain(r, &["--seed", "5"]);
    ok(&["ablate", "--run", r]);

    for rel in [
        "dataset/gen.stage.json",
        "dataset/train.json",
        "dataset/test.json",
        "banks/bank.stage.json",
        "banks/normalizer.json",
        "pool/synth.stage.json",
        "checkpoints/final/checkpoint.json",
        "checkpoints/train_log.jsonl",
        "scores/scores.json",
        "reports/eval.json",
        "reports/ablation_variants.csv",
        "reports/ablation_aggregations.csv",
        "reports/learning_curve.csv",
    ] {
        assert!(run.join(rel).exists(), "missing {rel}");
    }
    let report = json(&run.join("reports/eval.json"));
    assert_eq!(report["seed"], 5);
    let i_auroc = report["i_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&i_auroc));
    assert!(report["aupro"]["0.30"].as_f64().is_some());
    let log = fs::read_to_string(run.join("checkpoints/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // Manifests chain through digests of their upstream manifests.
    let train = json(&run.join("checkpoints/train.stage.json"));
    assert!(train["upstream"]["synth"].is_string() && train["upstream"]["bank"].is_string());
    assert_eq!(train["config"]["epochs"], 2);

    let csv = fs::read_to_string(run.join("reports/ablation_aggregations.csv")).unwrap();
    assert!(csv.starts_with("variant,I-AUROC,P-AUROC,AUPRO@30%,AUPRO@1%"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn reruns_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tmp.path().join("run");
    let r = r.to_str().unwrap();
    ok(&["gen", "--out", r, "--n-train", "4", "--n-test", "4"]);
    ok(&["bank", "--run", r]);
    let again = g2sf(&["bank", "--run", r]);
    assert_eq!(again.code, 2, "{}", again.stderr);
    assert!(again.stderr.contains("--force"));
    ok(&["bank", "--run", r, "--force"]);
}

#[test]
fn stale_upstream_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    ok(&["gen", "--out", r, "--n-train", "6", "--n-test", "4"]);

    // Nothing to build on yet.
    assert_eq!(g2sf(&["synth", "--run", r]).code, 3);
    assert_eq!(g2sf(&["bank", "--run", tmp.path().join("nowhere").to_str().unwrap()]).code, 3);

    ok(&["bank", "--run", r]);
    ok(&["synth", "--run", r, "--n-aug", "4"]);

    // Regenerating the banks invalidates the pool built from the old ones.
    ok(&["bank", "--run", r, "--force", "--set", "coreset_fraction=0.5"]);
    let stale = g2sf(&["train", "--run", r, "--epochs", "1"]);
    assert_eq!(stale.code, 3, "{}", stale.stderr);
    ok(&["synth", "--run", r, "--n-aug", "4", "--force"]);
    ok(&["train", "--run", r, "--epochs", "1"]);

    // Tampering with a recorded output is caught too.
    let normalizer = run.join("banks/normalizer.json");
    let mut text = fs::read_to_string(&normalizer).unwrap();
    text.push(' ');
    fs::write(&normalizer, text).unwrap();
    let tampered = g2sf(&["score", "--run", r]);
    assert_eq!(tampered.code, 3);
    assert!(tampered.stderr.contains("modified"), "{}", tampered.stderr);
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tmp.path().join("run");
    let r = r.to_str().unwrap();
    assert_eq!(g2sf(&["gen", "--out", r, "--set", "epoch=3"]).code, 2);
    assert_eq!(g2sf(&["gen", "--out", r, "--grid", "16by16"]).code, 2);
    assert_eq!(g2sf(&["gen", "--out", r, "--anomaly-modes", "pc,depth"]).code, 2);
    assert_eq!(g2sf(&["gen", "--out", r, "--set", "coreset_fraction=0"]).code, 2);
    assert_eq!(g2sf(&["gen"]).code, 2);
    assert_eq!(g2sf(&["frobnicate"]).code, 2);
    assert!(!Path::new(r).exists());
}

#[test]
fn later_stages_inherit_recorded_values() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "n_train = 5\nn_test = 3\ncoreset_fraction = 0.3\n").unwrap();
    let c = cfg.to_str().unwrap();
    ok(&["gen", "--out", r, "--config", c, "--seed", "3", "--n-test", "4"]);
    let gen = json(&run.join("dataset/gen.stage.json"));
    assert_eq!((gen["config"]["n_train"].as_u64(), gen["config"]["n_test"].as_u64()), (Some(5), Some(4)));

    // No --seed here: the seed recorded by gen carries over.
    ok(&["bank", "--run", r, "--config", c]);
    let bank = json(&run.join("banks/bank.stage.json"));
    assert_eq!(bank["seed"], 3);
    assert_eq!(bank["config"]["coreset_fraction"], 0.3);
    assert_eq!(bank["config"]["n_train"], 5);
}

#[test]
fn ingested_data_without_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("external");
    let data = SynthConfig { n_train: 8, n_test: 8, ..SynthConfig::default() };
    let mut ds = gen_synthetic_dataset(&data, 21).unwrap();
    for s in &mut ds.test {
        s.pixel_gt = None;
    }
    write_split(&src, Split::Train, &ds.train).unwrap();
    write_split(&src, Split::Test, &ds.test).unwrap();

    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    ok(&["gen", "--out", r, "--from", src.to_str().unwrap()]);
    ok(&["bank", "--run", r]);
    ok(&["synth", "--run", r, "--n-aug", "6"]);
    ok(&["train", "--run", r, "--epochs", "1"]);
    ok(&["score", "--run", r]);
    ok(&["eval", "--run", r]);
    let report = json(&run.join("reports/eval.json"));
    assert_eq!(report["pixel_metrics_absent"], true);
    assert!(report["p_auroc"].is_null());
    assert!(report["i_auroc"].as_f64().is_some());
}

#[test]
fn selftest_passes_and_flags_bad_checkpoints() {
    let o = ok(&["selftest"]);
    assert!(o.stdout.lines().count() >= 8);
    assert!(!o.stdout.contains("FAIL"));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("ckpt");
    fs::create_dir_all(bad.join("model")).unwrap();
    fs::write(bad.join("checkpoint.json"), "{ not json").unwrap();
    let o = g2sf(&["selftest", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert!(o.stdout.contains("checkpoint") && o.stdout.contains("FAIL"));
}
