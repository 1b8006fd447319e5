//! Optimization harness: batching of whole-image patch groups, the loss
//! assembly, one Adam step per round, per-epoch validation and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::losses::{haar_stack_images, mse_loss_var, pad_even_var, stack_images, wavelet_sq_var, LossReport, DEFAULT_GAMMA};
use crate::metrics::{psnr, ssim};
use crate::optim::Adam;
use crate::sampling::measurement_count;
use crate::unfolding::{Coupling, Forward, LambdaMode, ModelConfig, Pipeline, RhoMode, Trace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    MseOnly,
    #[default]
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ratio: f64,
    pub modules: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub coupling: Coupling,
    pub rho_mode: RhoMode,
    pub lambda_mode: LambdaMode,
    pub mss_enabled: bool,
    pub hfc_enabled: bool,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub patch_side: usize,
    pub channels: usize,
    /// Side of the square random crops used for training.
    pub crop: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training images.
    pub steps_per_epoch: usize,
    pub trainable_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ratio: 0.25,
            modules: 9,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            gamma: DEFAULT_GAMMA,
            coupling: Coupling::Detached,
            rho_mode: RhoMode::PerModule,
            lambda_mode: LambdaMode::BufferMean,
            mss_enabled: true,
            hfc_enabled: true,
            loss_mode: LossMode::Total,
            seed: 0,
            patch_side: 33,
            channels: 32,
            crop: 99,
            steps_per_epoch: 0,
            trainable_sampling: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio must be in (0, 1], got {}", self.ratio));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.crop < self.patch_side {
            return bad(format!("crop {} is smaller than the patch side {}", self.crop, self.patch_side));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let n = self.patch_side * self.patch_side;
        ModelConfig {
            patch_side: self.patch_side,
            measurements: measurement_count(self.ratio, n),
            modules: self.modules,
            channels: self.channels,
            coupling: self.coupling,
            rho_mode: self.rho_mode,
            lambda_mode: self.lambda_mode,
            mss: self.mss_enabled,
            hfc: self.hfc_enabled,
            trainable_sampling: self.trainable_sampling,
        }
    }

    fn effective_gamma(&self) -> f64 {
        match self.loss_mode {
            LossMode::MseOnly => 0.0,
            LossMode::Total => self.gamma,
        }
    }
}

/// Graph terms of the training loss. `wavelet[k]` is module `k`'s share of
/// `L_WT`, so `L_WT = Σ_k wavelet[k]`.
pub struct LossTerms<'t> {
    pub mse: Var<'t>,
    pub wavelet: Vec<Var<'t>>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn report(&self, gamma: f64) -> LossReport {
        let per_module_wt: Vec<f64> = self.wavelet.iter().map(Var::item).collect();
        let wt: f64 = per_module_wt.iter().sum();
        let total = self.total.item();
        debug_assert!((total - (self.mse.item() + gamma * wt)).abs() <= 1e-9 * total.abs().max(1.0));
        LossReport {
            mse: self.mse.item(),
            wt,
            total,
            per_module_wt,
        }
    }
}

/// `L_MSE` on the final image plus `γ·L_WT` over every module's whole-image
/// output. With `gamma = 0` the wavelet terms are skipped.
pub fn loss_terms<'t>(fwd: &Forward<'t>, originals: &[Image], gamma: f64) -> Result<LossTerms<'t>> {
    let target = stack_images(originals, false);
    if fwd.final_image.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "output batch {:?} does not match originals {:?}",
            fwd.final_image.shape(),
            target.shape()
        )));
    }
    let mse = mse_loss_var(&target, &fwd.final_image);
    let k = fwd.module_images.len();
    let mut wavelet = Vec::with_capacity(k);
    let mut total = mse.clone();
    if gamma > 0.0 && k > 0 {
        let target_wt = haar_stack_images(originals);
        let scale = 1.0 / (originals.len() * k) as f64;
        for img in &fwd.module_images {
            let term = wavelet_sq_var(&target_wt, &pad_even_var(img))?.scale(scale);
            total = total.add(&term.scale(gamma));
            wavelet.push(term);
        }
    }
    Ok(LossTerms { mse, wavelet, total })
}

/// One record per epoch in the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_wt: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint with the highest validation PSNR.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Total loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

fn trace_summary(trace: &Trace) -> String {
    let norm = |a: &ndarray::Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = format!("|x0| = {:.3e}", norm(&trace.x0));
    for (k, m) in trace.modules.iter().enumerate() {
        out += &format!(
            "; module {k}: |z| = {:.3e}, |lambda| = {:.3e}, |x~| = {:.3e}, |x| = {:.3e}",
            norm(&m.z),
            norm(&m.lambda),
            norm(&m.x_tilde),
            norm(&m.x)
        );
    }
    out
}

/// Forward pass, loss, backward pass and one Adam update on a batch of
/// equally sized images. Multiplier buffers and normalization statistics are
/// updated afterwards.
pub fn train_step(
    pipeline: &mut Pipeline,
    optimizer: &mut Adam,
    batch: &[Image],
    gamma: f64,
    step: u64,
) -> Result<LossReport> {
    let tape = Tape::new();
    let vars = pipeline.params.bind(&tape, pipeline.config.trainable_sampling);
    let solvers = pipeline.solvers()?;
    let mut fwd = pipeline.forward_train(&vars, batch, &solvers)?;
    let terms = loss_terms(&fwd, batch, gamma)?;
    let report = terms.report(gamma);
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            step: step as usize,
            detail: format!("loss {:?}; {}", report.total, trace_summary(&fwd.trace)),
        });
    }
    let grads = tape.backward(&terms.total);
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    vars.visit(&mut |name, v| {
        if let Some(g) = grads.get(v) {
            by_name.insert(name, g.clone());
        }
    });
    optimizer.begin_step();
    let mut result = Ok(());
    pipeline.params.visit_mut(&mut |name, p| {
        if let Some(g) = by_name.get(&name) {
            if result.is_ok() {
                result = optimizer.update(&name, p, g);
            }
        }
    });
    result?;
    let update = std::mem::take(&mut fwd.update);
    drop(fwd);
    pipeline.apply_update(update)?;
    Ok(report)
}

/// Random `side × side` crop; smaller images are reflect-padded first.
pub fn random_crop(image: &Image, side: usize, rng: &mut impl Rng) -> Image {
    let (h, w) = image.pixels.dim();
    let img = if h < side || w < side {
        let px = crate::imaging::reflect_pad(&image.pixels, side.saturating_sub(h), side.saturating_sub(w));
        Image::new(image.name.clone(), px)
    } else {
        image.clone()
    };
    let top = rng.random_range(0..=img.height() - side);
    let left = rng.random_range(0..=img.width() - side);
    img.crop(top, left, side, side)
}

/// Trains from scratch. `on_epoch` sees every history record as it is made.
pub fn train(
    config: &TrainConfig,
    train_images: &[Image],
    val_images: &[Image],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::fresh(config)?;
    continue_training(ckpt, train_images, val_images, on_epoch)
}

/// Runs the remaining epochs of `ckpt.config`.
pub fn continue_training(
    mut ckpt: Checkpoint,
    train_images: &[Image],
    val_images: &[Image],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    if train_images.is_empty() || val_images.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let gamma = cfg.effective_gamma();
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        train_images.len().div_ceil(cfg.batch_size)
    };
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    while ckpt.epoch < cfg.epochs {
        let mut rng: ChaCha8Rng = ckpt.rng.restore();
        let mut order: Vec<usize> = (0..train_images.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let (mut sum_total, mut sum_mse, mut sum_wt) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let batch: Vec<Image> = (0..cfg.batch_size)
                .map(|_| {
                    let img = &train_images[order[cursor % order.len()]];
                    cursor += 1;
                    random_crop(img, cfg.crop, &mut rng)
                })
                .collect();
            let report = train_step(&mut ckpt.pipeline, &mut ckpt.optimizer, &batch, gamma, ckpt.step)?;
            ckpt.step += 1;
            sum_total += report.total;
            sum_mse += report.mse;
            sum_wt += report.wt;
            step_losses.push(report.total);
        }
        ckpt.rng = RngState::capture(&rng);
        ckpt.epoch += 1;
        let val = evaluate(&ckpt.pipeline, val_images)?;
        let record = EpochRecord {
            epoch: ckpt.epoch,
            step: ckpt.step,
            train_loss: sum_total / steps as f64,
            train_mse: sum_mse / steps as f64,
            train_wt: sum_wt / steps as f64,
            val_psnr: val.mean_psnr,
            val_ssim: val.mean_ssim,
        };
        log::info!(
            "epoch {} step {}: loss {:.6} val PSNR {:.3} dB SSIM {:.4}",
            record.epoch,
            record.step,
            record.train_loss,
            record.val_psnr,
            record.val_ssim
        );
        on_epoch(&record);
        if best.as_ref().is_none_or(|(p, _)| record.val_psnr > *p) {
            best = Some((record.val_psnr, ckpt.clone()));
        }
        history.push(record);
    }
    let best = best.map(|(_, c)| c).unwrap_or_else(|| ckpt.clone());
    Ok(TrainOutcome {
        last: ckpt,
        best,
        history,
        step_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// `| image | PSNR | SSIM |` with a closing mean row.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| image | PSNR | SSIM |\n|---|---:|---:|\n");
        for s in &self.images {
            out += &format!("| {} | {:.2} | {:.4} |\n", s.name, s.psnr, s.ssim);
        }
        out += &format!("| mean | {:.2} | {:.4} |\n", self.mean_psnr, self.mean_ssim);
        out
    }
}

/// Frozen-pipeline reconstruction and scoring of every image.
pub fn evaluate(pipeline: &Pipeline, images: &[Image]) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    let mut scores = Vec::with_capacity(images.len());
    for img in images {
        let rec = pipeline.reconstruct(img)?;
        scores.push(ImageScore {
            name: img.name.clone(),
            psnr: psnr(img, &rec.image)?,
            ssim: ssim(img, &rec.image)?,
        });
    }
    let n = scores.len() as f64;
    Ok(EvalReport {
        mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        images: scores,
    })
}
