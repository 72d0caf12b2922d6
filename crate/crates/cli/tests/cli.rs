use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdgzsl::data::load_bundle;
use sdgzsl::trainer::load_model;

fn sdgzsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdgzsl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "synthetic.samples_per_class=20",
    "--set",
    "train.arch.latent_dim=4",
    "--set",
    "train.arch.hs_dim=4",
    "--set",
    "train.arch.hn_dim=4",
    "--set",
    "train.arch.cvae_hidden=16",
    "--set",
    "train.arch.decoder_hidden=16",
    "--set",
    "train.arch.relation_hidden=16",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.n_syn=20",
    "--set",
    "eval.classifier.epochs=5",
];

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth-data", "--out", s(&out), "--seed", "3"];
    args.extend_from_slice(SMALL);
    ok(&sdgzsl(&args));
    out.join("manifest.json")
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(manifest), "--out", s(out), "--seed", "3"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    sdgzsl(&args)
}

#[test]
fn synth_data_writes_a_loadable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let bundle = load_bundle(&manifest).unwrap();
    assert_eq!(bundle.features().rows(), 200);
    assert!(dir.path().join("data/ground_truth.sdt").exists());
    assert!(dir.path().join("data/resolved_config.json").exists());

    let again = dir.path().join("again");
    let mut args = vec!["synth-data", "--out", s(&again), "--seed", "3"];
    args.extend_from_slice(SMALL);
    ok(&sdgzsl(&args));
    for f in ["data.sdt", "manifest.json", "ground_truth.sdt"] {
        assert_eq!(
            std::fs::read(dir.path().join("data").join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn invalid_spec_exits_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"seen_classes": 0}"#).unwrap();
    let out = sdgzsl(&["synth-data", "--spec", s(&spec), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    std::fs::write(&spec, r#"{"seen_class": 3}"#).unwrap();
    let out = sdgzsl(&["synth-data", "--spec", s(&spec), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_and_missing_files_exit_one() {
    assert_eq!(sdgzsl(&["train"]).status.code(), Some(1));
    assert_eq!(sdgzsl(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = sdgzsl(&[
        "eval",
        "--data",
        "/nonexistent/manifest.json",
        "--ckpt",
        "/nonexistent/c.sdck",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/manifest.json"));
    assert!(sdgzsl(&["--help"]).status.success());
}

#[test]
fn train_eval_retrieve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let run = dir.path().join("run");
    ok(&train(&manifest, &run, &["--set", "train.epochs=2"]));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss_cvae,loss_rec,loss_rel,tc,loss_dis,kl_w,tc_w,seconds"));
    assert_eq!(log.lines().count(), 3);
    let ckpt = run.join("checkpoint.sdck");

    let ev = dir.path().join("eval");
    let mut args = vec!["eval", "--data", s(&manifest), "--ckpt", s(&ckpt), "--rep", "hn", "--out", s(&ev)];
    args.extend_from_slice(SMALL);
    let stdout = ok(&sdgzsl(&args));
    assert!(stdout.contains("rep hn"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report_hn.json")).unwrap()).unwrap();
    for key in ["representation", "U", "S", "H", "T1", "per_class", "retrieval_map", "confusion"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["retrieval_map"].as_object().unwrap().len(), 3);
    let counts = std::fs::read_to_string(ev.join("confusion_hn_counts.csv")).unwrap();
    assert!(counts.starts_with("class,"));
    assert!(ev.join("confusion_hn_percent.csv").exists());
    assert!(ev.join("resolved_config.json").exists());

    let mut args = vec!["retrieve", "--data", s(&manifest), "--ckpt", s(&ckpt), "--ratios", "1.0,0.5"];
    args.extend_from_slice(SMALL);
    let stdout = ok(&sdgzsl(&args));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "ratio,mAP");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn ablation_flags_set_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    for (flag, rel, tc, dis) in [
        ("no-rn", 0.0, 1.0, 1.0),
        ("no-tc", 1.0, 0.0, 0.0),
        ("cvae-only", 0.0, 0.0, 0.0),
    ] {
        let run = dir.path().join(flag);
        ok(&train(&manifest, &run, &["--set", "train.epochs=0", "--ablation", flag]));
        let cfg: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run.join("resolved_config.json")).unwrap()).unwrap();
        let w = &cfg["train"]["weights"];
        assert_eq!(
            (w["relation"].as_f64(), w["tc"].as_f64(), w["dis"].as_f64()),
            (Some(rel), Some(tc), Some(dis)),
            "{flag}"
        );
    }
}

#[test]
fn resumed_run_equals_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let straight = dir.path().join("straight");
    ok(&train(&manifest, &straight, &["--set", "train.epochs=2"]));

    let first = dir.path().join("first");
    ok(&train(&manifest, &first, &["--set", "train.epochs=1"]));
    let second = dir.path().join("second");
    ok(&train(
        &manifest,
        &second,
        &["--set", "train.epochs=2", "--resume", s(&first.join("checkpoint.sdck"))],
    ));
    let (_, a) = load_model(straight.join("checkpoint.sdck")).unwrap();
    let (_, b) = load_model(second.join("checkpoint.sdck")).unwrap();
    assert_eq!(a, b);

    // A different configuration cannot silently continue a checkpoint.
    let out = train(
        &manifest,
        &dir.path().join("bad"),
        &["--set", "train.epochs=2", "--set", "train.adam.lr=0.5", "--resume", s(&first.join("checkpoint.sdck"))],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_reports_failures_with_exit_two() {
    let stdout = ok(&sdgzsl(&["gradcheck", "--seeds", "1"]));
    assert_eq!(stdout.lines().count(), 6);
    assert!(stdout.lines().skip(1).all(|l| l.ends_with(",true")));
    let out = sdgzsl(&["gradcheck", "--seeds", "1", "--set", "gradcheck.tolerance=1e-18"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tc_bench_independent_halves() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&sdgzsl(&[
        "tc-bench",
        "--rho",
        "0",
        "--dims",
        "4,4",
        "--set",
        "tc_bench.steps=400",
        "--set",
        "tc_bench.eval_samples=20000",
        "--out",
        s(dir.path()),
    ]));
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
    assert!(row[2].parse::<f64>().unwrap().abs() < 0.05, "{stdout}");
    assert!(dir.path().join("tc_bench.json").exists());
    assert!(dir.path().join("resolved_config.json").exists());
}
