use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vitbis::data::{SyntheticSpec, VtbContainer};
use vitbis::nn::ModelConfig;
use vitbis::train::{OptimConfig, RunConfig, RunManifest};

fn vitbis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitbis"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny(max_steps: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            image_height: 16,
            image_width: 16,
            embed_dim: 12,
            depth: 1,
            num_heads: 2,
            reduced_channels: 8,
            init_std: 0.1,
            ..ModelConfig::default()
        },
        optim: OptimConfig {
            lr: 1e-3,
            max_steps,
            seed: 3,
            ..OptimConfig::default()
        },
        data: SyntheticSpec {
            image_size: 16,
            num_images: 4,
            ..SyntheticSpec::default()
        },
        holdout_images: 3,
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_with_exit_zero() {
    let o = vitbis(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("transformer_block (seed 7)"));
    assert!(out.contains(" 0 failed"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn usage_errors_exit_one_with_synopsis() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    for args in [
        vec!["train", "--config", s(&missing)],
        vec!["frobnicate"],
        vec![],
        vec!["train", "--seed", "abc"],
        vec!["ablate", "sideways"],
        vec!["eval"],
        vec!["predict", "--checkpoint", s(&missing)],
    ] {
        let o = vitbis(&args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("usage: vitbis"), "{args:?}");
    }
    let mut v: serde_json::Value = serde_json::from_str(&tiny(1).to_json()).unwrap();
    v["model"]["dropout"] = 0.1.into();
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, v.to_string()).unwrap();
    assert_eq!(code(&vitbis(&["train", "--config", s(&unknown)])), 1);
    let o = vitbis(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("gen-data"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vtb");
    std::fs::write(&bad, b"VTB1 definitely not a checkpoint").unwrap();
    let o = vitbis(&["eval", "--checkpoint", s(&bad)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny(3));
    let run = dir.path().join("run");
    let o = vitbis(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = RunManifest::load(&run).unwrap();
    assert_eq!(manifest.loss_trace.len(), 3);
    let ck = run.join("ckpt_000003.vtb");

    let metrics = dir.path().join("metrics");
    let o = vitbis(&["eval", "--checkpoint", s(&ck), "--out", s(&metrics)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("DSC %"));
    let csv = std::fs::read_to_string(metrics.join("metrics_holdout.csv")).unwrap();
    assert_eq!(csv, manifest.reports["holdout"].to_csv());

    let preds = dir.path().join("preds");
    let o = vitbis(&["predict", "--checkpoint", s(&ck), "--out", s(&preds)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&preds).unwrap().collect();
    assert_eq!(files.len(), 3);
    let m = VtbContainer::read(preds.join("mask_0000.vtb")).unwrap();
    assert_eq!(m.get("mask").unwrap().dims, vec![16, 16]);
    assert!(m.get("mask").unwrap().as_u8().unwrap().iter().all(|&l| l < 2));

    let data = dir.path().join("data");
    let o = vitbis(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let preds2 = dir.path().join("preds2");
    let o = vitbis(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--out",
        s(&preds2),
        "--input",
        s(&data.join("train.vtb")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&preds2).unwrap().count(), 4);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let short = write_config(dir.path(), "short.json", &tiny(2));
    let long = write_config(dir.path(), "long.json", &tiny(4));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&vitbis(&["train", "--config", s(&long), "--out", s(&a)])), 0);
    assert_eq!(code(&vitbis(&["train", "--config", s(&short), "--out", s(&b)])), 0);
    let ck = b.join("ckpt_000002.vtb");
    let o = vitbis(&["train", "--checkpoint", s(&ck), "--config", s(&long), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ma, mb) = (RunManifest::load(&a).unwrap(), RunManifest::load(&b).unwrap());
    assert_eq!(ma.loss_trace, mb.loss_trace);
    assert_eq!(
        std::fs::read(a.join("ckpt_000004.vtb")).unwrap(),
        std::fs::read(b.join("ckpt_000004.vtb")).unwrap()
    );
    assert_eq!(mb.checkpoints.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4]);

    let mut other = tiny(4);
    other.model.depth = 2;
    let other = write_config(dir.path(), "other.json", &other);
    let o = vitbis(&["train", "--checkpoint", s(&ck), "--config", s(&other), "--out", s(&b)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablation_commands_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny(2));
    let out = dir.path().join("up");
    let o = vitbis(&["ablate", "upsample", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("BI ") || l.starts_with("TC ")).collect();
    assert_eq!(rows.len(), 2);
    assert!(std::fs::read_to_string(out.join("ablate_upsample.txt")).unwrap() == text);

    let out = dir.path().join("scale");
    let o = vitbis(&["ablate", "scale", "--config", s(&cfg), "--dims", "12,16", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("L=")).count(), 6);
    assert!(text.contains("L=4, d=384"));
}
