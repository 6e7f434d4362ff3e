//! Run configuration: every tokenizer key plus data, schedule, loss and
//! analysis settings, read from `key=value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use mstok_core::latentlab::KdeOptions;
use mstok_core::objectives::{AdamWConfig, LossWeights};
use mstok_core::tokenizer::TokenizerConfig;
use mstok_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: TokenizerConfig,
    /// Folder of same-size P6 images; synthetic data when unset.
    pub data_dir: Option<PathBuf>,
    pub synthetic_images: usize,
    pub steps: usize,
    /// When nonzero, overrides `steps` with whole passes over the training split.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub l1_weight: f64,
    pub mse_weight: f64,
    pub lpips_weight: f64,
    pub gan_weight: f64,
    pub scale_weights: Option<Vec<f64>>,
    pub log_interval: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint: PathBuf,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub eval_fraction: f64,
    pub kde_grid: usize,
    pub kde_bandwidth: Option<f64>,
    pub kde_padding: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: TokenizerConfig::default(),
            data_dir: None,
            synthetic_images: 512,
            steps: 2000,
            epochs: 0,
            batch_size: 64,
            lr_start: 1e-4,
            lr_end: 1e-6,
            warmup_ratio: 0.03,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            l1_weight: 1.0,
            mse_weight: 0.4,
            lpips_weight: 0.0,
            gan_weight: 0.0,
            scale_weights: None,
            log_interval: 50,
            log_path: None,
            checkpoint: PathBuf::from("mstok.htok"),
            checkpoint_interval: 500,
            eval_fraction: 0.125,
            kde_grid: 64,
            kde_bandwidth: None,
            kde_padding: 3.0,
        }
    }
}

const RUN_KEYS: [&str; 25] = [
    "data_dir",
    "synthetic_images",
    "steps",
    "epochs",
    "batch_size",
    "lr_start",
    "lr_end",
    "warmup_ratio",
    "weight_decay",
    "beta1",
    "beta2",
    "grad_clip",
    "l1_weight",
    "mse_weight",
    "lpips_weight",
    "gan_weight",
    "scale_weights",
    "log_interval",
    "log_path",
    "checkpoint",
    "checkpoint_interval",
    "eval_fraction",
    "kde_grid",
    "kde_bandwidth",
    "kde_padding",
];

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn optional_f64(key: &str, value: &str) -> Result<Option<f64>> {
    match value.trim() {
        "" | "auto" | "none" => Ok(None),
        v => num(key, v).map(Some),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "data_dir" => self.data_dir = optional_path(value),
            "synthetic_images" => self.synthetic_images = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_start" | "lr" => self.lr_start = num(key, value)?,
            "lr_end" => self.lr_end = num(key, value)?,
            "warmup_ratio" => self.warmup_ratio = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "l1_weight" => self.l1_weight = num(key, value)?,
            "mse_weight" => self.mse_weight = num(key, value)?,
            "lpips_weight" => self.lpips_weight = num(key, value)?,
            "gan_weight" => self.gan_weight = num(key, value)?,
            "scale_weights" => {
                self.scale_weights = match value.trim() {
                    "" | "none" | "equal" => None,
                    v => Some(v.split(',').map(|w| num(key, w)).collect::<Result<_>>()?),
                }
            }
            "log_interval" => self.log_interval = num(key, value)?,
            "log_path" => self.log_path = optional_path(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value.trim()),
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "eval_fraction" => self.eval_fraction = num(key, value)?,
            "kde_grid" => self.kde_grid = num(key, value)?,
            "kde_bandwidth" => self.kde_bandwidth = optional_f64(key, value)?,
            "kde_padding" => self.kde_padding = num(key, value)?,
            _ if TokenizerConfig::keys().contains(&key) => self.model.set(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` text: one assignment per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then the optional file, then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg = RunConfig::parse(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file, then the overrides; values are parsed but the
    /// combination is not validated.
    pub fn parse(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            cfg.apply_text(&fs::read_to_string(p)?)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!("eval_fraction {} must lie in [0, 1)", self.eval_fraction)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} must lie in [0, 1]", self.warmup_ratio)));
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("learning rates must be nonnegative and grad_clip positive".into()));
        }
        if self.kde_grid < 2 || self.kde_padding < 0.0 {
            return Err(Error::Config("kde_grid must be at least 2 and kde_padding nonnegative".into()));
        }
        if let Some(ws) = &self.scale_weights {
            if ws.len() != self.model.scales.len() {
                return Err(Error::Config(format!("{} scale_weights for {} scales", ws.len(), self.model.scales.len())));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            l1: self.l1_weight,
            mse: self.mse_weight,
            perceptual: self.lpips_weight,
            adversarial: self.gan_weight,
            kl: self.model.kl_weight,
            scale_weights: self.scale_weights.clone(),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }

    pub fn kde(&self) -> KdeOptions {
        KdeOptions { grid: self.kde_grid, bandwidth: self.kde_bandwidth, padding: self.kde_padding }
    }

    /// Every key with its current value.
    pub fn to_kv(&self) -> String {
        let mut out = self.model.to_kv();
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        for key in RUN_KEYS {
            let v = match key {
                "data_dir" => path(&self.data_dir),
                "synthetic_images" => self.synthetic_images.to_string(),
                "steps" => self.steps.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr_start" => format!("{:?}", self.lr_start),
                "lr_end" => format!("{:?}", self.lr_end),
                "warmup_ratio" => format!("{:?}", self.warmup_ratio),
                "weight_decay" => format!("{:?}", self.weight_decay),
                "beta1" => format!("{:?}", self.beta1),
                "beta2" => format!("{:?}", self.beta2),
                "grad_clip" => format!("{:?}", self.grad_clip),
                "l1_weight" => format!("{:?}", self.l1_weight),
                "mse_weight" => format!("{:?}", self.mse_weight),
                "lpips_weight" => format!("{:?}", self.lpips_weight),
                "gan_weight" => format!("{:?}", self.gan_weight),
                "scale_weights" => self.scale_weights.as_ref().map_or("equal".into(), |w| {
                    w.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
                }),
                "log_interval" => self.log_interval.to_string(),
                "log_path" => path(&self.log_path),
                "checkpoint" => self.checkpoint.display().to_string(),
                "checkpoint_interval" => self.checkpoint_interval.to_string(),
                "eval_fraction" => format!("{:?}", self.eval_fraction),
                "kde_grid" => self.kde_grid.to_string(),
                "kde_bandwidth" => self.kde_bandwidth.map_or("auto".into(), |b| format!("{b:?}")),
                "kde_padding" => format!("{:?}", self.kde_padding),
                _ => unreachable!("listed key"),
            };
            out.push_str(&format!("{key}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_with_comments_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# desk run\nsteps = 10\nscales=1,2,4,8  # four levels\n\nregime=scale-causal\n").unwrap();
        cfg.apply_override("batch_size=4").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.model.scales, vec![1, 2, 4, 8]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("learning_rate", "1"), Err(Error::Config(_))));
        assert!(cfg.apply_text("steps 10").is_err());
        assert!(cfg.apply_override("steps").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("kde_bandwidth", "0.5").unwrap();
        cfg.set("scale_weights", "1,1,2,4").unwrap();
        cfg.set("data_dir", "/tmp/imgs").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn disabled_losses_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.set("lpips_weight", "1.0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
