use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskadapt::config::{RunConfig, CONFIG_KEYS};
use maskadapt::synthdata::DomainSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskadapt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// 16×16 scenes and a dozen iterations.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    let spec = |name: &str, hue: f64| DomainSpec {
        name: name.into(),
        height: 16,
        width: 16,
        row_spacing_px: 8.0,
        plant_radius_px: 2.0,
        hue_shift_deg: hue,
        ..DomainSpec::default()
    };
    cfg.data.source = Some(spec("source", 0.0));
    cfg.data.target = Some(spec("target", 30.0));
    cfg.data.source_train = 4;
    cfg.data.target_train = 4;
    cfg.data.target_val = 2;
    cfg.model.channels = 4;
    cfg.model.attention_dim = 4;
    cfg.masking.block_size = 4;
    cfg.train.iterations = 12;
    cfg.train.warmup_iters = 3;
    cfg.train.pretrain_iterations = 4;
    cfg.train.eval_every = 4;
    cfg.train.checkpoint_every = 4;
    cfg.train.confidence_every = 5;
    cfg.train.unmasked_every = 3;
    cfg.output_dir = dir.join("run");
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_enumerates_every_config_key() {
    let help = ok(&["--help"]);
    for k in CONFIG_KEYS {
        assert!(help.contains(k.path), "missing {}", k.path);
    }
    assert!(help.contains("data.target.hue_shift_deg"));
    for sub in ["generate", "train", "eval", "ablate", "render"] {
        assert!(help.contains(sub));
    }
}

#[test]
fn generate_train_eval_write_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let listing = ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(listing.lines().count(), 3);
    for split in ["source", "target", "val"] {
        assert!(data.join(split).join("manifest.json").is_file());
        assert!(data.join(split).join("00000_rgb.ppm").is_file());
    }

    let run_dir = dir.path().join("run");
    let summary = ok(&["train", "--config", s(&cfg)]);
    let last: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(last["iteration"], 12);
    for f in ["config.json", "metrics.jsonl", "steps.jsonl", "checkpoint_0000004.json", "checkpoint_final.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().count(), 3);

    let ckpt = run_dir.join("checkpoint_final.json");
    let eval_dir = dir.path().join("eval");
    let report = ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    let report: serde_json::Value = serde_json::from_str(report.trim()).unwrap();
    assert_eq!(report["frames"], 2);
    // the last logged evaluation scored the same model on the same frames
    assert_eq!(report["miou"], last["miou"]);
    assert!(eval_dir.join("eval_report.json").is_file());
    let on_disk = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("val")), "--out", s(&eval_dir)]);
    assert!(on_disk.contains("\"frames\":2"));
}

#[test]
fn identical_invocations_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "9"]);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    for f in ["metrics.jsonl", "steps.jsonl"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "steps.jsonl"), read(&c, "steps.jsonl"));
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ablation");
    let table = ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--variants",
        "no_fusion,no_gradients,full",
        "--seeds",
        "0,1,2",
    ]);
    assert_eq!(table.lines().count(), 2 + 3, "{table}");
    let summary = std::fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(1) == Some("3")));
    assert_eq!(std::fs::read_to_string(out.join("ablation_runs.csv")).unwrap().lines().count(), 10);
    assert!(out.join("full").join("seed_2").join("metrics.jsonl").is_file());
}

#[test]
fn render_with_all_visible_mask_keeps_rgb() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let out = dir.path().join("render");
    ok(&["render", "--config", s(&cfg), "--out", s(&out), "--data", s(&data.join("val")), "--ratio", "0", "--samples", "2"]);
    for i in 0..2 {
        let rgb = std::fs::read(out.join(format!("{i:03}_rgb.ppm"))).unwrap();
        assert_eq!(rgb, std::fs::read(out.join(format!("{i:03}_masked_rgb.ppm"))).unwrap());
        assert_eq!(rgb, std::fs::read(data.join("val").join(format!("{i:05}_rgb.ppm"))).unwrap());
        let mask = std::fs::read(out.join(format!("{i:03}_mask_rgb.pgm"))).unwrap();
        assert!(mask.ends_with(&[255; 256]));
        for f in ["depth.pgm", "depth_gradient.pgm", "labels.ppm", "mask_depth.pgm"] {
            assert!(out.join(format!("{i:03}_{f}")).is_file(), "{f}");
        }
    }

    let masked = dir.path().join("masked");
    ok(&["render", "--config", s(&cfg), "--out", s(&masked), "--geometry", "vertical", "--ratio", "0.5", "--samples", "1"]);
    assert!(!masked.join("000_prediction.ppm").exists());
}

#[test]
fn render_draws_predictions_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok(&["train", "--config", s(&cfg)]);
    let ckpt = dir.path().join("run").join("checkpoint_final.json");
    let out = dir.path().join("render");
    ok(&["render", "--checkpoint", s(&ckpt), "--out", s(&out), "--samples", "1"]);
    let pred = std::fs::read(out.join("000_prediction.ppm")).unwrap();
    assert!(pred.starts_with(b"P6\n16 16\n255\n"));
}

fn one_line_error(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
    err
}

#[test]
fn invalid_config_lists_all_violations_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"version": 1, "colour": "red", "masking": {"m_start": 1.5, "block_size": 0}, "train": {"ema_alpha": "high"}}"#,
    )
    .unwrap();
    let err = one_line_error(&run(&["train", "--config", s(&path)]));
    assert!(err.starts_with("error[validation]: "));
    for needle in ["colour", "masking.m_start", "masking.block_size", "train.ema_alpha"] {
        assert!(err.contains(needle), "{needle}: {err}");
    }
    assert_eq!(err.matches("; ").count(), 3, "{err}");
    assert_eq!(run(&["train", "--config", s(&path)]).status.code(), Some(1));
}

#[test]
fn missing_files_name_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("nope.json");
    let err = one_line_error(&run(&["train", "--config", s(&gone)]));
    assert!(err.starts_with("error[io]") && err.contains(s(&gone)), "{err}");
    let err = one_line_error(&run(&["eval", "--checkpoint", s(&gone)]));
    assert!(err.contains(s(&gone)), "{err}");
}

#[test]
fn usage_errors_are_one_line() {
    let out = run(&["train", "--seed", "minus-one"]);
    let err = one_line_error(&out);
    assert!(err.starts_with("error[usage]"));
    assert_eq!(out.status.code(), Some(2));
    let err = one_line_error(&run(&["ablate", "--variants", "fusion", "--seeds", "0"]));
    assert!(err.contains("unknown variant"), "{err}");
}
