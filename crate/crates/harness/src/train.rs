//! Training loop, evaluation report and JSON-lines logging.

use std::fs::File;
use std::io::{BufWriter, Write};

use mstok_core::latentlab::{analyze, commutation_residuals, token_vectors, LatentStats};
use mstok_core::numerics::no_grad;
use mstok_core::numerics::rng::{seeded, stream};
use mstok_core::objectives::{adamw_step, clip_grad_norm, cosine_lr, rec_loss, LossWeights, OptimState};
use mstok_core::pyramid::image_pyramid;
use mstok_core::tokenizer::{save_checkpoint, Mode, TokenizerModel};
use mstok_core::{Error, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::data::{Batches, Dataset};
use crate::metrics::{psnr, ssim, SsimParams};

/// Scores on held-out images, all at the top scale unless noted.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    /// Mean multi-scale reconstruction loss (no KL term).
    pub rec_loss: f64,
    /// Top-scale `l1·L1 + mse·MSE`.
    pub top_rec_loss: f64,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub per_scale: Vec<f64>,
    pub commutation: Vec<f64>,
    pub latent: Option<LatentStats>,
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        json!({
            "images": self.images,
            "rec_loss": self.rec_loss,
            "top_rec_loss": self.top_rec_loss,
            "l1": self.l1,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "per_scale": self.per_scale,
            "commutation": self.commutation,
            "latent": self.latent.map(|s| json!({
                "density_cv": s.density_cv,
                "gini": s.gini,
                "norm_entropy": s.norm_entropy,
                "n_points": s.n_points,
                "grid_size": s.grid_size,
                "bandwidth": s.bandwidth,
            })),
        })
    }
}

/// Scores `model` on `indices` in eval mode, `batch` images at a time.
pub fn evaluate(model: &TokenizerModel<f32>, data: &Dataset, indices: &[usize], batch: usize, cfg: &RunConfig) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let weights = LossWeights { kl: 0.0, scale_weights: None, ..cfg.loss_weights() };
    let rec_only = LossWeights { l1: 1.0, mse: 0.0, ..weights.clone() };
    let schedule = model.schedule().clone();
    let levels = schedule.levels();
    let ssim_params = SsimParams::default();
    let (mut per_scale, mut commutation) = (vec![0.0; levels], vec![0.0; levels]);
    let (mut l1, mut top, mut psnr_sum, mut ssim_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut latents = Vec::new();
    no_grad(|| -> Result<()> {
        for chunk in indices.chunks(batch.max(1)) {
            let x = data.batch(chunk);
            let rec = model.reconstruct(&x, Mode::Eval)?;
            let targets = image_pyramid(&x, &schedule, model.config.patch)?;
            let n = chunk.len() as f64;
            for (s, (o, t)) in rec.outputs.iter().zip(&targets).enumerate() {
                per_scale[s] += rec_loss(o, t, &weights)?.item() as f64 * n;
            }
            let out = rec.outputs.last().expect("top level");
            top += rec_loss(out, &x, &weights)?.item() as f64 * n;
            l1 += rec_loss(out, &x, &rec_only)?.item() as f64 * n;
            let per = 3 * data.size * data.size;
            for (a, b) in x.data().chunks(per).zip(out.data().chunks(per)) {
                psnr_sum += psnr(b, a)?;
                ssim_sum += ssim(b, a, 3, data.size, data.size, &ssim_params)?;
            }
            if levels > 1 {
                for (c, r) in commutation.iter_mut().zip(commutation_residuals(model, &x)?) {
                    *c += r * n;
                }
            }
            latents.extend(token_vectors(&rec.code.mu));
        }
        Ok(())
    })?;
    let n = indices.len() as f64;
    per_scale.iter_mut().chain(commutation.iter_mut()).for_each(|v| *v /= n);
    let latent = if latents.len() >= 3 {
        match analyze(&latents, &cfg.kde()) {
            Ok(stats) => Some(stats),
            Err(e) => {
                log::warn!("latent analysis skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    Ok(EvalReport {
        images: indices.len(),
        rec_loss: per_scale.iter().sum::<f64>() / levels as f64,
        top_rec_loss: top / n,
        l1: l1 / n,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        per_scale,
        commutation: if levels > 1 { commutation } else { Vec::new() },
        latent,
    })
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: TokenizerModel<f32>,
    pub log: Vec<Value>,
    pub initial: EvalReport,
    pub last: EvalReport,
    pub steps: usize,
}

/// Number of optimizer steps a config asks for.
pub fn planned_steps(cfg: &RunConfig, train_images: usize) -> usize {
    if cfg.epochs > 0 {
        cfg.epochs * (train_images / cfg.batch_size.min(train_images).max(1))
    } else {
        cfg.steps
    }
}

fn finite(v: f64, what: &str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} became {v} at step {step}")))
    }
}

/// Trains from the config seed. Each log line goes to `sink` as it is produced.
///
/// Checkpoints are written every `checkpoint_interval` steps and at the end;
/// a non-finite loss aborts before the next write, so the previous checkpoint
/// stays intact.
pub fn train(cfg: &RunConfig, data: &Dataset, sink: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.size != cfg.model.image_size {
        return Err(Error::Config(format!("images are {} px, model expects {}", data.size, cfg.model.image_size)));
    }
    let seed = cfg.model.seed;
    let (train_idx, eval_idx) = data.split(cfg.eval_fraction, seed);
    let eval_idx = if eval_idx.is_empty() { train_idx.clone() } else { eval_idx };
    let steps = planned_steps(cfg, train_idx.len());
    let weights = cfg.loss_weights();
    let mut model = TokenizerModel::<f32>::new(cfg.model.clone())?;
    let mut opt = OptimState::new(cfg.adamw(), &model.params);
    let mut batches = Batches::new(train_idx, cfg.batch_size, seed);
    let (mut sample_rng, mut drop_rng) = (seeded(seed, stream::SAMPLE), seeded(seed, stream::DROP_PATH));
    let mut file = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |line: Value, log: &mut Vec<Value>| -> Result<()> {
        writeln!(sink, "{line}")?;
        if let Some(f) = file.as_mut() {
            writeln!(f, "{line}")?;
        }
        log.push(line);
        Ok(())
    };
    let initial = evaluate(&model, data, &eval_idx, cfg.batch_size, cfg)?;
    if steps == 0 {
        save_checkpoint(&model, &cfg.checkpoint)?;
    }
    for step in 0..steps {
        let lr = cosine_lr(step, steps, cfg.warmup_ratio, cfg.lr_start, cfg.lr_end);
        let x = data.batch(&batches.next_batch());
        let out = model.loss(&x, Mode::Train { sample: &mut sample_rng, drop: &mut drop_rng }, &weights)?;
        let total = finite(out.total.item() as f64, "loss", step)?;
        out.total.backward()?;
        let mut grads = model.params.grads();
        finite(clip_grad_norm(&mut grads, cfg.grad_clip), "gradient norm", step)?;
        adamw_step(&mut opt, &mut model.params, &grads, lr)?;
        let done = step + 1;
        if done % cfg.log_interval.max(1) == 0 || done == steps || step == 0 {
            let line = json!({ "step": done, "lr": lr, "total": total, "per_scale": out.per_scale, "kl": out.kl });
            emit(line, &mut log)?;
        }
        if done == steps || (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0) {
            save_checkpoint(&model, &cfg.checkpoint)?;
        }
    }
    if let Some(f) = file.as_mut() {
        f.flush()?;
    }
    let last = evaluate(&model, data, &eval_idx, cfg.batch_size, cfg)?;
    Ok(TrainOutcome { model, log, initial, last, steps })
}

/// Loads the configured dataset: the image folder when set, otherwise synthetic images.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => Dataset::from_dir(dir, cfg.model.image_size),
        None => Ok(Dataset::synthetic(cfg.synthetic_images, cfg.model.image_size, cfg.model.seed)),
    }
}
