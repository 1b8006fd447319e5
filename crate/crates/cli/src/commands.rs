use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csunfold::ablation::{run_ablation, OrderingNote, Suite};
use csunfold::archive::MeasurementArchive;
use csunfold::checkpoint::Checkpoint;
use csunfold::imaging::{list_images, load_dataset, load_image, Image};
use csunfold::sampling::{init_whitened, SamplingOperator};
use csunfold::training::{continue_training, evaluate, train as train_model};

use crate::config::RunConfig;
use crate::Common;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const ABLATION_SUFFIX: &str = ".ablation.json";

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(&common.overrides());
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to touch a non-empty one unless `overwrite` is set,
/// and echoes the effective config into it.
pub fn prepare_out(dir: &Path, overwrite: bool, cfg: &RunConfig) -> Result<()> {
    if dir.exists() {
        let busy = std::fs::read_dir(dir)
            .with_context(|| format!("{} is not a readable directory", dir.display()))?
            .next()
            .is_some();
        if busy && !overwrite {
            bail!("output directory {} is not empty; pass --overwrite to reuse it", dir.display());
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn load_folder(root: &Path) -> Result<Vec<Image>> {
    let paths = list_images(root)?;
    if paths.is_empty() {
        bail!("no PNG/BMP/PGM images under {}", root.display());
    }
    paths.iter().map(|p| Ok(load_image(p)?)).collect()
}

fn unique_path(dir: &Path, name: &str, taken: &mut HashSet<String>) -> PathBuf {
    let stem = if name.is_empty() { "image" } else { name };
    let mut candidate = stem.to_string();
    let mut i = 1;
    while !taken.insert(candidate.clone()) {
        candidate = format!("{stem}_{i}");
        i += 1;
    }
    dir.join(format!("{candidate}.png"))
}

pub fn sample(cfg: &RunConfig, out: &Path, overwrite: bool, checkpoint: Option<&Path>) -> Result<()> {
    let images = load_folder(cfg.data_root()?)?;
    let (op, mss) = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            (ckpt.pipeline.operator(), ckpt.pipeline.config.mss)
        }
        None => {
            let model = cfg.train.model_config();
            let op: SamplingOperator = init_whitened(model.measurements, model.n(), cfg.train.seed)?;
            (op, cfg.train.mss_enabled)
        }
    };
    prepare_out(out, overwrite, cfg)?;
    let mut archive = MeasurementArchive::new(&op, mss);
    for img in &images {
        archive.push_image(&op, img)?;
    }
    let path = out.join("measurements.bin");
    archive.save(&path)?;
    log::info!(
        "measured {} images with a {}x{} operator into {}",
        images.len(),
        op.m(),
        op.n(),
        path.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, overwrite: bool, resume: Option<&Path>) -> Result<()> {
    let groups = load_dataset(cfg.data_root()?, &cfg.data.split, cfg.train.seed)?;
    let (train_set, val_set) = (&groups[0], &groups[1]);
    if train_set.is_empty() || val_set.is_empty() {
        bail!(
            "split {:?} leaves {} training and {} validation images; both must be nonempty",
            cfg.data.split,
            train_set.len(),
            val_set.len()
        );
    }
    let start = match resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            if ckpt.config.epochs != cfg.train.epochs {
                log::info!("extending run from {} to {} epochs", ckpt.config.epochs, cfg.train.epochs);
            }
            ckpt.config.epochs = cfg.train.epochs;
            ckpt
        }
        None => Checkpoint::fresh(&cfg.train)?,
    };
    prepare_out(out, overwrite, cfg)?;
    let mut history = BufWriter::new(File::create(out.join(HISTORY_FILE))?);
    let mut write_err = None;
    let outcome = if resume.is_some() {
        continue_training(start, train_set, val_set, &mut |rec| {
            if let Err(e) = writeln!(history, "{}", serde_json::to_string(rec).unwrap()).and_then(|_| history.flush()) {
                write_err.get_or_insert(e);
            }
        })?
    } else {
        drop(start);
        train_model(&cfg.train, train_set, val_set, &mut |rec| {
            if let Err(e) = writeln!(history, "{}", serde_json::to_string(rec).unwrap()).and_then(|_| history.flush()) {
                write_err.get_or_insert(e);
            }
        })?
    };
    if let Some(e) = write_err {
        return Err(e).context("cannot write the metrics history");
    }
    outcome.last.save(&out.join("last.ckpt"))?;
    outcome.best.save(&out.join("best.ckpt"))?;
    if let Some(rec) = outcome.history.last() {
        log::info!(
            "finished {} epochs ({} steps): loss {:.6}, val PSNR {:.2} dB, SSIM {:.4}",
            rec.epoch,
            rec.step,
            rec.train_loss,
            rec.val_psnr,
            rec.val_ssim
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>, overwrite: bool) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let images = load_folder(cfg.data_root()?)?;
    let report = evaluate(&ckpt.pipeline, &images)?;
    let table = report.to_markdown();
    print!("{table}");
    if let Some(out) = out {
        prepare_out(out, overwrite, cfg)?;
        std::fs::write(out.join("eval.md"), &table)?;
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

pub fn reconstruct(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    overwrite: bool,
    archive: Option<&Path>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let pipeline = &ckpt.pipeline;
    let mut outputs = Vec::new();
    match archive {
        Some(path) => {
            let archive =
                MeasurementArchive::load(path).with_context(|| format!("cannot read archive {}", path.display()))?;
            archive.check_operator(&pipeline.operator())?;
            if archive.mss != pipeline.config.mss {
                bail!(
                    "archive mean subtraction is {}, checkpoint expects {}",
                    archive.mss,
                    pipeline.config.mss
                );
            }
            for rec in &archive.records {
                let mut r = pipeline.reconstruct_measurements(rec.y.view(), rec.means(archive.mss).view(), rec.grid)?;
                r.image.name = rec.name.clone();
                outputs.push(r.image);
            }
        }
        None => {
            for img in load_folder(cfg.data_root()?)? {
                outputs.push(pipeline.reconstruct(&img)?.image);
            }
        }
    }
    prepare_out(out, overwrite, cfg)?;
    let mut taken = HashSet::new();
    for img in &outputs {
        img.save(&unique_path(out, &img.name, &mut taken))?;
    }
    log::info!("wrote {} reconstructions to {}", outputs.len(), out.display());
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<()> {
    let groups = load_dataset(cfg.data_root()?, &cfg.data.split, cfg.train.seed)?;
    let (train_set, val_set) = (&groups[0], &groups[1]);
    if train_set.is_empty() || val_set.is_empty() {
        bail!("the split leaves an empty training or validation set");
    }
    if cfg.ablation.seeds.is_empty() || cfg.ablation.suites.is_empty() {
        bail!("ablation.suites and ablation.seeds must be nonempty");
    }
    prepare_out(out, overwrite, cfg)?;
    let mut summary = String::new();
    for &suite in &cfg.ablation.suites {
        let mut tables = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let base = csunfold::training::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let table = run_ablation(&base, suite, &cfg.ablation.ratios, train_set, val_set, &mut |labels, ratio| {
                log::info!("{} suite, seed {seed}, row {}, ratio {ratio}", suite.name(), labels.join("/"));
            })?;
            let stem = format!("{}-seed{seed}", suite.name());
            std::fs::write(out.join(format!("{stem}{ABLATION_SUFFIX}")), serde_json::to_string_pretty(&table)?)?;
            std::fs::write(out.join(format!("{stem}.md")), table.to_markdown())?;
            summary += &table.to_markdown();
            summary.push('\n');
            tables.push(table);
        }
        if suite == Suite::Independence {
            let note = OrderingNote::from_tables(&tables);
            log::info!("soft ordering check: {}", note.summary());
            summary += &format!("Soft ordering check: {}\n\n", note.summary());
        }
    }
    std::fs::write(out.join("ablation.md"), &summary)?;
    print!("{summary}");
    Ok(())
}
