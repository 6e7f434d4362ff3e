use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionRegime;
use crate::error::{Error, Result};
use crate::pyramid::ScaleSchedule;

/// How the decoder builds coarse token maps from the base grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleMode {
    /// Area pooling, no parameters.
    Interp,
    /// Learnable strided convolution chains.
    Conv,
}

impl DownsampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DownsampleMode::Interp => "interp",
            DownsampleMode::Conv => "conv",
        }
    }
}

impl fmt::Display for DownsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DownsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "interp" | "interpolate" | "area" => Ok(DownsampleMode::Interp),
            "conv" | "convolution" => Ok(DownsampleMode::Conv),
            other => Err(Error::Config(format!("unknown downsample mode {other:?} (expected interp or conv)"))),
        }
    }
}

/// Architecture of a tokenizer. Every field is addressable as `key=value`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub patch: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    /// Attention heads of both encoder and decoder.
    pub heads: usize,
    pub latent_dim: usize,
    /// Token-grid side per decoder level, ascending; the last is `image_size / patch`.
    pub scales: Vec<usize>,
    pub downsample: DownsampleMode,
    pub regime: AttentionRegime,
    pub kl_weight: f64,
    pub seed: u64,
    /// Stochastic-depth rate of decoder residual branches during training.
    pub drop_path: f64,
    /// One pixel head per level instead of a single shared head.
    pub per_scale_heads: bool,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            image_size: 32,
            patch: 4,
            enc_layers: 2,
            dec_layers: 4,
            enc_width: 64,
            dec_width: 64,
            heads: 4,
            latent_dim: 16,
            scales: vec![1, 2, 4, 8],
            downsample: DownsampleMode::Conv,
            regime: AttentionRegime::ScaleCausal,
            kl_weight: 1e-6,
            seed: 0,
            drop_path: 0.1,
            per_scale_heads: false,
            mlp_ratio: 4,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

pub(crate) const KEYS: [&str; 18] = [
    "image_size",
    "patch",
    "enc_layers",
    "dec_layers",
    "enc_width",
    "dec_width",
    "heads",
    "latent_dim",
    "scales",
    "downsample",
    "regime",
    "kl_weight",
    "seed",
    "drop_path",
    "per_scale_heads",
    "mlp_ratio",
    "ln_eps",
    "init_std",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TokenizerConfig {
    /// 256 px, patch 16, grids 1..16, 6-layer 768-wide encoder, 24-layer 1024-wide decoder.
    pub fn large_preset() -> Self {
        TokenizerConfig {
            image_size: 256,
            patch: 16,
            enc_layers: 6,
            dec_layers: 24,
            enc_width: 768,
            dec_width: 1024,
            heads: 16,
            latent_dim: 32,
            scales: vec![1, 2, 4, 8, 16],
            ..Default::default()
        }
    }

    /// Single-level counterpart with the same encoder and decoder.
    pub fn single_scale(&self) -> Self {
        TokenizerConfig { scales: vec![self.base_grid()], regime: AttentionRegime::Full, ..self.clone() }
    }

    pub fn base_grid(&self) -> usize {
        self.image_size / self.patch.max(1)
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    /// Sets one field from text. Unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "image_size" => self.image_size = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "enc_width" => self.enc_width = parse(key, value)?,
            "dec_width" => self.dec_width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "scales" => self.scales = ScaleSchedule::parse_grids(value)?,
            "downsample" => self.downsample = value.parse()?,
            "regime" => self.regime = value.parse()?,
            "kl_weight" => self.kl_weight = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "drop_path" => self.drop_path = parse(key, value)?,
            "per_scale_heads" => self.per_scale_heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown tokenizer key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "image_size" => self.image_size.to_string(),
            "patch" => self.patch.to_string(),
            "enc_layers" => self.enc_layers.to_string(),
            "dec_layers" => self.dec_layers.to_string(),
            "enc_width" => self.enc_width.to_string(),
            "dec_width" => self.dec_width.to_string(),
            "heads" => self.heads.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "scales" => self.scales.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
            "downsample" => self.downsample.to_string(),
            "regime" => self.regime.to_string(),
            "kl_weight" => format!("{:?}", self.kl_weight),
            "seed" => self.seed.to_string(),
            "drop_path" => format!("{:?}", self.drop_path),
            "per_scale_heads" => self.per_scale_heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "ln_eps" => format!("{:?}", self.ln_eps),
            "init_std" => format!("{:?}", self.init_std),
            _ => return None,
        })
    }

    /// `key=value` lines covering every field.
    pub fn to_kv(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("known key"))).collect()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TokenizerConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::new(self.base_grid(), &self.scales)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("enc_width", self.enc_width),
            ("dec_width", self.dec_width),
            ("heads", self.heads),
            ("latent_dim", self.latent_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        for (name, w) in [("enc_width", self.enc_width), ("dec_width", self.dec_width)] {
            if w % self.heads != 0 {
                return Err(Error::Config(format!("{name} {w} is not divisible by {} heads", self.heads)));
            }
        }
        let schedule = self.schedule()?;
        if self.downsample == DownsampleMode::Conv {
            schedule.check_dyadic()?;
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} must lie in [0, 1)", self.drop_path)));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!("kl_weight {} must be finite and nonnegative", self.kl_weight)));
        }
        if !(self.ln_eps > 0.0 && self.init_std >= 0.0) {
            return Err(Error::Config("ln_eps must be positive and init_std nonnegative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TokenizerConfig::default().validate().unwrap();
        TokenizerConfig::large_preset().validate().unwrap();
        assert_eq!(TokenizerConfig::default().base_grid(), 8);
        assert_eq!(TokenizerConfig::large_preset().schedule().unwrap().total(), 341);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TokenizerConfig::default();
        c.set("scales", "2,8").unwrap();
        c.set("regime", "scale-independent").unwrap();
        c.set("downsample", "interp").unwrap();
        c.set("kl_weight", "0.125").unwrap();
        assert_eq!(TokenizerConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn invalid_configs() {
        let mut c = TokenizerConfig::default();
        assert!(c.set("nope", "1").is_err());
        c.patch = 5;
        assert!(c.validate().is_err());
        let c = TokenizerConfig { scales: vec![1, 2, 4], ..Default::default() };
        assert!(c.validate().is_err());
        let c = TokenizerConfig { heads: 5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TokenizerConfig { scales: vec![3, 8], ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("downsample=interp"));
        let c = TokenizerConfig { scales: vec![3, 8], downsample: DownsampleMode::Interp, ..Default::default() };
        c.validate().unwrap();
    }
}
