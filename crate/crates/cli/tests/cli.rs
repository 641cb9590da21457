use std::path::Path;
use std::process::{Command, Output};

use crswin_core::losses::VatConfig;
use crswin_core::model::ModelConfig;
use crswin_core::pipeline::TrainConfig;

fn crswin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crswin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crswin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_infer_evaluate_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let preds = tmp.path().join("preds");

    let listed = ok(&[
        "gen",
        "--seed",
        "3",
        "--dims",
        "20,18,16",
        "--out",
        s(&data),
        "--count",
        "2",
    ]);
    assert_eq!(listed.lines().count(), 2);
    assert!(data.join("synthetic-000003.crsv").exists());

    let model = ModelConfig::tiny();
    let cfg = TrainConfig {
        epochs: 2,
        crop_size: model.input_dims,
        split_fraction: 0.5,
        vat: VatConfig {
            n_power: 1,
            ..VatConfig::default()
        },
        model,
        ..TrainConfig::default()
    };
    let cfg_path = tmp.path().join("train.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let report = ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg_path),
        "--out",
        s(&run),
    ]);
    assert!(report.contains("best validation Dice"));
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("best.crck");
    for id in ["synthetic-000003", "synthetic-000004"] {
        let input = data.join(format!("{id}.crsv"));
        let out = preds.join(format!("{id}_pred.nii"));
        ok(&[
            "infer",
            "--ckpt",
            s(&ckpt),
            "--in",
            s(&input),
            "--out",
            s(&out),
            "--overlap",
            "0.5",
        ]);
        assert!(out.exists());
    }

    let metrics = tmp.path().join("eval/metrics.csv");
    let summary = ok(&[
        "eval",
        "--pred",
        s(&preds),
        "--gt",
        s(&data),
        "--out",
        s(&metrics),
    ]);
    assert!(summary.contains("WT"));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(tmp.path().join("eval/metrics_boxplot.csv").exists());

    let slices = tmp.path().join("slices");
    let pred = preds.join("synthetic-000003_pred.nii");
    let input = data.join("synthetic-000003.crsv");
    let written = ok(&[
        "export-slices",
        "--in",
        s(&input),
        "--pred",
        s(&pred),
        "--gt",
        s(&input),
        "--axis",
        "y",
        "--slices",
        "0,5,17",
        "--out",
        s(&slices),
    ]);
    assert_eq!(written.lines().count(), 3);
}

#[test]
fn exit_codes() {
    assert_eq!(crswin(&["gen", "--seed", "1"]).status.code(), Some(1));
    assert_eq!(crswin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        crswin(&["gen", "--seed", "1", "--dims", "1,2", "--out", "x"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(crswin(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.crck");
    let code = crswin(&[
        "infer",
        "--ckpt",
        s(&missing),
        "--in",
        s(&missing),
        "--out",
        s(&missing),
    ])
    .status
    .code();
    assert_eq!(code, Some(2));
    let junk = tmp.path().join("junk.crsv");
    std::fs::write(&junk, b"not a volume").unwrap();
    let code = crswin(&[
        "export-slices",
        "--in",
        s(&junk),
        "--pred",
        s(&junk),
        "--out",
        s(tmp.path()),
    ])
    .status
    .code();
    assert_eq!(code, Some(2));
    let code = crswin(&[
        "gen",
        "--seed",
        "1",
        "--dims",
        "4,4,4",
        "--out",
        s(tmp.path()),
    ])
    .status
    .code();
    assert_eq!(
        code,
        Some(2),
        "grids below the synthetic minimum are data errors"
    );
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen",
        "--seed",
        "0",
        "--dims",
        "16,16,16",
        "--out",
        s(&data),
    ]);
    let model = ModelConfig::tiny();
    let cfg = TrainConfig {
        lr: 1e300,
        epochs: 3,
        crop_size: model.input_dims,
        model,
        ..TrainConfig::default()
    };
    let cfg_path = tmp.path().join("train.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out = crswin(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg_path),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
