use std::path::PathBuf;
use std::process::{Command, Output};

use csunfold::archive::MeasurementArchive;
use csunfold::checkpoint::Checkpoint;
use csunfold::imaging::{load_image, synthetic_images, Image};
use csunfold::metrics::psnr;
use csunfold::training::TrainConfig;
use ndarray::Array2;

const TINY: &str = r#"
[data]
split = [0.75, 0.25]

[train]
ratio = 0.25
modules = 1
epochs = 2
batch_size = 2
patch_side = 4
channels = 2
crop = 8
steps_per_epoch = 2

[ablation]
seeds = [0]
ratios = [0.25]
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::create_dir(ws.data()).unwrap();
        for img in synthetic_images(4, 12, 12, 5) {
            img.save(&ws.data().join(format!("{}.png", img.name))).unwrap();
        }
        std::fs::write(ws.config(), TINY).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn config(&self) -> PathBuf {
        self.path("run.toml")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_csunfold"))
            .args(args)
            .env_remove("CSUNFOLD_DATA")
            .env("RUST_LOG", "warn")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn train(&self, out: &str) {
        self.ok(&["train", "--config", "run.toml", "--data", "data", "--out", out]);
    }
}

#[test]
fn train_then_eval_emits_table() {
    let ws = Workspace::new();
    ws.train("run");
    for f in ["config.toml", "history.jsonl", "last.ckpt", "best.ckpt"] {
        assert!(ws.path("run").join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(ws.path("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "train_loss", "train_mse", "train_wt", "val_psnr", "val_ssim"] {
        assert!(first.get(key).is_some(), "history lacks {key}");
    }
    let echoed = std::fs::read_to_string(ws.path("run/config.toml")).unwrap();
    assert!(echoed.contains("[train]") && echoed.contains("modules = 1"));

    let ckpt_before = std::fs::read(ws.path("run/last.ckpt")).unwrap();
    let table = ws.ok(&["eval", "--checkpoint", "run/last.ckpt", "--data", "data", "--out", "eval"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "| image | PSNR | SSIM |");
    assert_eq!(lines.len(), 2 + 4 + 1);
    assert!(lines.last().unwrap().starts_with("| mean |"));
    assert_eq!(std::fs::read_to_string(ws.path("eval/eval.md")).unwrap(), table);
    assert_eq!(std::fs::read(ws.path("run/last.ckpt")).unwrap(), ckpt_before);
}

#[test]
fn flags_override_the_file_and_resume_extends() {
    let ws = Workspace::new();
    ws.ok(&[
        "train", "--config", "run.toml", "--data", "data", "--out", "k2", "-K", "2", "--seed", "3", "--ratio", "0.5",
        "--coupling", "end2end", "--lambda-mode", "shared",
    ]);
    let ckpt = Checkpoint::load(&ws.path("k2/last.ckpt")).unwrap();
    let t = &ckpt.config;
    assert_eq!((t.modules, t.seed, t.ratio), (2, 3, 0.5));
    assert_eq!(ckpt.pipeline.config.measurements, 8);
    assert_eq!(serde_json::to_string(&t.coupling).unwrap(), "\"end2end\"");
    assert_eq!(serde_json::to_string(&t.lambda_mode).unwrap(), "\"shared\"");

    std::fs::write(ws.path("longer.toml"), TINY.replace("epochs = 2", "epochs = 3")).unwrap();
    ws.ok(&[
        "train", "--config", "longer.toml", "--data", "data", "--out", "resumed", "--checkpoint", "k2/last.ckpt",
    ]);
    let history = std::fs::read_to_string(ws.path("resumed/history.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(history.trim()).unwrap();
    assert_eq!(rec["epoch"], 3);
    assert_eq!(rec["step"], 6);
}

#[test]
fn sample_then_reconstruct_from_archive() {
    let ws = Workspace::new();
    std::fs::create_dir(ws.path("flat")).unwrap();
    Image::new("flat", Array2::from_elem((8, 8), 0.4)).save(&ws.path("flat/flat.png")).unwrap();
    ws.ok(&["sample", "--config", "run.toml", "--data", "flat", "--out", "flat_meas", "--seed", "4"]);
    let ar = MeasurementArchive::load(&ws.path("flat_meas/measurements.bin")).unwrap();
    assert_eq!((ar.n, ar.m), (16, 4));
    assert!(ar.records[0].y.iter().all(|v| v.abs() < 1e-12));

    ws.train("run");
    ws.ok(&["sample", "--config", "run.toml", "--data", "data", "--out", "meas", "--checkpoint", "run/last.ckpt"]);
    ws.ok(&["reconstruct", "--checkpoint", "run/last.ckpt", "--archive", "meas/measurements.bin", "--out", "rec"]);
    for path in std::fs::read_dir(ws.data()).unwrap() {
        let path = path.unwrap().path();
        let original = load_image(&path).unwrap();
        let rebuilt = load_image(&ws.path("rec").join(path.file_name().unwrap())).unwrap();
        assert!(psnr(&original, &rebuilt).unwrap().is_finite());
    }
    let err = ws.fails(&["reconstruct", "--checkpoint", "run/last.ckpt", "--archive", "flat_meas/measurements.bin", "--out", "bad"]);
    assert!(err.contains("different"), "{err}");
}

#[test]
fn zero_module_checkpoint_reproduces_initial_reconstruction() {
    let ws = Workspace::new();
    let cfg = TrainConfig {
        modules: 0,
        patch_side: 4,
        crop: 8,
        ..TrainConfig::default()
    };
    let ckpt = Checkpoint::fresh(&cfg).unwrap();
    ckpt.save(&ws.path("k0.ckpt")).unwrap();
    ws.ok(&["reconstruct", "--checkpoint", "k0.ckpt", "--data", "data", "--out", "rec"]);
    for img in synthetic_images(4, 12, 12, 5) {
        let stored = load_image(&ws.data().join(format!("{}.png", img.name))).unwrap();
        let expect = ckpt.pipeline.reconstruct(&stored).unwrap().image;
        let got = load_image(&ws.path("rec").join(format!("{}.png", img.name))).unwrap();
        let quantized = expect.pixels.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        assert!(got.pixels.iter().zip(quantized.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn ablate_and_report_render_tables() {
    let ws = Workspace::new();
    ws.train("runs/r25");
    ws.ok(&["train", "--config", "run.toml", "--data", "data", "--out", "runs/r50", "--ratio", "0.5"]);
    let summary = ws.ok(&["ablate", "--config", "run.toml", "--data", "data", "--out", "abl"]);
    assert!(summary.contains("| Independent rho | Independent lambda | PSNR |"));
    assert!(summary.contains("| MSS | HFC | 25% |"));
    assert!(summary.contains("| L_MSE |"));
    assert!(summary.contains("Soft ordering check"));
    for suite in ["independence", "mss_hfc", "loss"] {
        assert!(ws.path(&format!("abl/{suite}-seed0.ablation.json")).is_file());
    }
    let md = ws.ok(&["report", "--out", "rep", "runs", "abl"]);
    assert!(md.contains("## Training runs"));
    assert!(md.contains("| model | 50% | 25% |"));
    assert!(md.contains("| MSS | HFC | 25% |"));
    assert_eq!(md.matches("| ✓ | ✓ |").count(), 2);
    let svg = std::fs::read_to_string(ws.path("rep/psnr_vs_ratio.svg")).unwrap();
    assert!(svg.contains("<svg"));
}

#[test]
fn errors_are_actionable() {
    let ws = Workspace::new();
    let err = ws.fails(&["eval", "--checkpoint", "missing.ckpt", "--data", "data"]);
    assert!(err.contains("missing.ckpt") && err.contains("does not exist"), "{err}");

    std::fs::write(ws.path("bad.toml"), "[train]\nmodule = 3\n").unwrap();
    let err = ws.fails(&["train", "--config", "bad.toml", "--data", "data", "--out", "x"]);
    assert!(err.contains("bad.toml"), "{err}");
    assert!(!ws.path("x").exists());

    let err = ws.fails(&["train", "--config", "run.toml", "--out", "x"]);
    assert!(err.contains("CSUNFOLD_DATA"), "{err}");

    let err = ws.fails(&["train", "--config", "run.toml", "--data", "data", "--ratio", "1.5", "--out", "x"]);
    assert!(err.contains("ratio"), "{err}");
}

#[test]
fn output_directories_are_protected() {
    let ws = Workspace::new();
    ws.train("run");
    let before = std::fs::read(ws.path("run/last.ckpt")).unwrap();
    let err = ws.fails(&["train", "--config", "run.toml", "--data", "data", "--out", "run"]);
    assert!(err.contains("--overwrite"), "{err}");
    assert_eq!(std::fs::read(ws.path("run/last.ckpt")).unwrap(), before);
    ws.ok(&["train", "--config", "run.toml", "--data", "data", "--out", "run", "--overwrite"]);
}

#[test]
fn data_root_from_environment() {
    let ws = Workspace::new();
    let out = Command::new(env!("CARGO_BIN_EXE_csunfold"))
        .args(["eval", "--checkpoint", "k.ckpt"])
        .env("CSUNFOLD_DATA", ws.data())
        .current_dir(ws.dir.path())
        .output()
        .unwrap();
    // No checkpoint yet: the data root resolved but the checkpoint did not.
    assert!(String::from_utf8_lossy(&out.stderr).contains("k.ckpt"));
    Checkpoint::fresh(&TrainConfig {
        modules: 0,
        patch_side: 4,
        crop: 8,
        ..TrainConfig::default()
    })
    .unwrap()
    .save(&ws.path("k.ckpt"))
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_csunfold"))
        .args(["eval", "--checkpoint", "k.ckpt"])
        .env("CSUNFOLD_DATA", ws.data())
        .current_dir(ws.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| mean |"));
}
