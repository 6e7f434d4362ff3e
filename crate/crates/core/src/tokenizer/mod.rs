//! The tokenizer model: patch embedding, encoder, Gaussian latent head,
//! token pyramid, masked decoder and per-scale pixel heads.

mod checkpoint;
mod config;
pub mod reference;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DownsampleMode, TokenizerConfig};

use crate::attention::{build_mask, transformer_block, AttentionMask, AttnWeights, BlockParams, DropPath};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal, seeded, stream, truncated_normal, SeededRng};
use crate::numerics::{ParamStore, Real, Tensor};
use crate::objectives::{multiscale_loss, LossBreakdown, LossWeights};
use crate::pyramid::{
    averaging_kernel, downsample_conv, downsample_interp, image_pyramid, positional_encoding, ConvChains, PeParams,
    ScaleSchedule, TokenPyramid,
};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Mean and clamped log-variance of the latent Gaussian, `[B, g, g, d_z]` each.
#[derive(Debug, Clone)]
pub struct LatentCode<T: Real> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// Forward mode. Training draws latent noise and drop-path masks from the given streams.
pub enum Mode<'a> {
    Eval,
    Train { sample: &'a mut SeededRng, drop: &'a mut SeededRng },
}

/// Per-level RGB outputs `[B, 3, g_s·p, g_s·p]`, low to high, and the latent code.
#[derive(Debug, Clone)]
pub struct Reconstruction<T: Real> {
    pub outputs: Vec<Tensor<T>>,
    pub code: LatentCode<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Ones,
    Zeros,
    /// Averaging kernel of the given size plus normal noise.
    Averaging(usize),
}

fn block_shapes(prefix: &str, i: usize, width: usize, ratio: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let p = format!("{prefix}.{i}");
    out.push((format!("{p}.ln1.gain"), vec![width], Init::Ones));
    out.push((format!("{p}.ln1.bias"), vec![width], Init::Zeros));
    out.push((format!("{p}.attn.qkv"), vec![width, 3 * width], Init::Normal));
    out.push((format!("{p}.attn.proj"), vec![width, width], Init::Normal));
    out.push((format!("{p}.ln2.gain"), vec![width], Init::Ones));
    out.push((format!("{p}.ln2.bias"), vec![width], Init::Zeros));
    out.push((format!("{p}.mlp.fc1"), vec![width, ratio * width], Init::Normal));
    out.push((format!("{p}.mlp.fc2"), vec![ratio * width, width], Init::Normal));
}

/// Every parameter of a config in initialization order.
fn layout(config: &TokenizerConfig) -> Result<Vec<(String, Vec<usize>, Init)>> {
    config.validate()?;
    let schedule = config.schedule()?;
    let (we, wd, p, g) = (config.enc_width, config.dec_width, config.patch, config.base_grid());
    let dz = config.latent_dim;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![we, 3, p, p], Init::Normal),
        ("patch_embed.bias".to_string(), vec![we], Init::Zeros),
        ("enc_pe.spatial".to_string(), vec![g, g, we], Init::Normal),
        ("enc_pe.scale".to_string(), vec![1, we], Init::Normal),
    ];
    for i in 0..config.enc_layers {
        block_shapes("enc", i, we, config.mlp_ratio, &mut out);
    }
    out.push(("enc_norm.gain".into(), vec![we], Init::Ones));
    out.push(("enc_norm.bias".into(), vec![we], Init::Zeros));
    out.push(("latent_head.weight".into(), vec![we, 2 * dz], Init::Normal));
    out.push(("latent_head.bias".into(), vec![2 * dz], Init::Zeros));
    out.push(("latent_proj.weight".into(), vec![dz, wd], Init::Normal));
    out.push(("latent_proj.bias".into(), vec![wd], Init::Zeros));
    if config.downsample == DownsampleMode::Conv {
        for (l, chain) in ConvChains::<f64>::shapes(wd, &schedule)?.into_iter().enumerate() {
            for (j, s) in chain.into_iter().enumerate() {
                out.push((format!("down.{l}.{j}"), s.to_vec(), Init::Averaging(s[2])));
            }
        }
    }
    out.push(("dec_pe.spatial".into(), vec![g, g, wd], Init::Normal));
    out.push(("dec_pe.scale".into(), vec![schedule.levels(), wd], Init::Normal));
    for i in 0..config.dec_layers {
        block_shapes("dec", i, wd, config.mlp_ratio, &mut out);
    }
    out.push(("dec_norm.gain".into(), vec![wd], Init::Ones));
    out.push(("dec_norm.bias".into(), vec![wd], Init::Zeros));
    let heads = if config.per_scale_heads { schedule.levels() } else { 1 };
    for h in 0..heads {
        let prefix = if config.per_scale_heads { format!("pixel_head.{h}") } else { "pixel_head".into() };
        out.push((format!("{prefix}.weight"), vec![wd, 3 * p * p], Init::Normal));
        out.push((format!("{prefix}.bias"), vec![3 * p * p], Init::Zeros));
    }
    Ok(out)
}

/// Number of scalar parameters a config instantiates.
pub fn param_count(config: &TokenizerConfig) -> Result<usize> {
    Ok(layout(config)?.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum())
}

/// Names and shapes a config instantiates, in store order.
pub fn param_shapes(config: &TokenizerConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(layout(config)?.into_iter().map(|(n, s, _)| (n, s)).collect())
}

#[derive(Debug, Clone)]
pub struct TokenizerModel<T: Real> {
    pub config: TokenizerConfig,
    pub params: ParamStore<T>,
    schedule: ScaleSchedule,
    mask: AttentionMask,
    additive: Option<Tensor<T>>,
}

impl<T: Real> TokenizerModel<T> {
    /// Fresh model initialized from the config seed.
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        let mut rng = seeded(config.seed, stream::INIT);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config)? {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => truncated_normal(&mut rng, n, config.init_std),
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
                Init::Averaging(size) => {
                    let noise: Vec<T> = truncated_normal(&mut rng, n, config.init_std);
                    let base = averaging_kernel::<T>(shape[0], size);
                    base.data().iter().zip(noise).map(|(&a, e)| a + e).collect()
                }
            };
            params.insert(name, data, &shape)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing store after checking it against the config layout.
    pub fn from_params(config: TokenizerConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = param_shapes(&config)?;
        if expected.len() != params.len() {
            return Err(Error::Config(format!("expected {} parameters, found {}", expected.len(), params.len())));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(params.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {have} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let schedule = config.schedule()?;
        let mask = build_mask(&schedule, config.regime);
        let additive = mask.additive();
        Ok(TokenizerModel { config, params, schedule, mask, additive })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Result<TokenizerModel<U>> {
        TokenizerModel::from_params(self.config.clone(), self.params.cast())
    }

    pub(crate) fn p(&self, name: &str) -> Tensor<T> {
        self.params.get(name).expect("parameter present by construction").clone()
    }

    pub(crate) fn block(&self, prefix: &str, i: usize) -> BlockParams<T> {
        let n = |s: &str| self.p(&format!("{prefix}.{i}.{s}"));
        BlockParams {
            ln1_gain: n("ln1.gain"),
            ln1_bias: n("ln1.bias"),
            attn: AttnWeights { qkv: n("attn.qkv"), proj: n("attn.proj") },
            ln2_gain: n("ln2.gain"),
            ln2_bias: n("ln2.bias"),
            fc1: n("mlp.fc1"),
            fc2: n("mlp.fc2"),
        }
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        if x.rank() != 4 || x.shape()[1] != 3 || x.shape()[2] != s || x.shape()[3] != s {
            return Err(Error::Dimension { op: "encode", lhs: x.shape().to_vec(), rhs: vec![3, s, s] });
        }
        Ok(())
    }

    /// `x: [B, 3, H, W]` in `[-1, 1]` to the latent Gaussian over the base grid.
    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentCode<T>> {
        self.check_image(x)?;
        let c = &self.config;
        let (b, g, we, dz) = (x.shape()[0], c.base_grid(), c.enc_width, c.latent_dim);
        let pe = PeParams { spatial: self.p("enc_pe.spatial"), per_scale: self.p("enc_pe.scale") };
        let top = ScaleSchedule::new(g, &[g])?;
        let pe = positional_encoding(&pe, &top)?.pop().expect("one level");
        let mut h = x
            .conv2d(&self.p("patch_embed.weight"), c.patch)?
            .permute(&[0, 2, 3, 1])?
            .add(&self.p("patch_embed.bias"))?
            .add(&pe)?
            .reshape(&[b, g * g, we])?;
        for i in 0..c.enc_layers {
            h = transformer_block(&h, &self.block("enc", i), c.heads, None, c.ln_eps, None)?;
        }
        let stats = h
            .layer_norm(&self.p("enc_norm.gain"), &self.p("enc_norm.bias"), c.ln_eps)?
            .matmul(&self.p("latent_head.weight"))?
            .add(&self.p("latent_head.bias"))?
            .reshape(&[b, g, g, 2 * dz])?;
        let mu = stats.slice(3, 0, dz)?;
        let logvar = stats.slice(3, dz, dz)?.clamp(LOGVAR_MIN, LOGVAR_MAX);
        Ok(LatentCode { mu, logvar })
    }

    /// Projects a `[B, g, g, d_z]` latent to decoder width, builds the pyramid,
    /// adds per-level positional encodings and concatenates to `[B, total, D]`.
    pub fn decoder_input(&self, z: &Tensor<T>) -> Result<TokenPyramid<T>> {
        let c = &self.config;
        let g = c.base_grid();
        if z.rank() != 4 || z.shape()[1..] != [g, g, c.latent_dim] {
            return Err(Error::Dimension { op: "decode", lhs: z.shape().to_vec(), rhs: vec![g, g, c.latent_dim] });
        }
        let base = z.matmul(&self.p("latent_proj.weight"))?.add(&self.p("latent_proj.bias"))?;
        let pyramid = match c.downsample {
            DownsampleMode::Interp => downsample_interp(&base, &self.schedule)?,
            DownsampleMode::Conv => {
                let shapes = ConvChains::<T>::shapes(c.dec_width, &self.schedule)?;
                let levels = shapes
                    .iter()
                    .enumerate()
                    .map(|(l, chain)| (0..chain.len()).map(|j| self.p(&format!("down.{l}.{j}"))).collect())
                    .collect();
                downsample_conv(&ConvChains { levels }, &base, &self.schedule)?
            }
        };
        let pe = PeParams { spatial: self.p("dec_pe.spatial"), per_scale: self.p("dec_pe.scale") };
        let pes = positional_encoding(&pe, &self.schedule)?;
        let maps = pyramid.maps.iter().zip(&pes).map(|(m, pe)| m.add(pe)).collect::<Result<Vec<_>>>()?;
        TokenPyramid::from_maps(maps, &self.schedule)
    }

    /// Runs the decoder over a `[B, total, D]` sequence and returns one image per level.
    pub fn decode_sequence(&self, seq: &Tensor<T>, drop: Option<&mut SeededRng>) -> Result<Vec<Tensor<T>>> {
        let c = &self.config;
        let mut drop = match drop {
            Some(rng) if c.drop_path > 0.0 => Some(DropPath { rate: c.drop_path, rng }),
            _ => None,
        };
        let mut h = seq.clone();
        for i in 0..c.dec_layers {
            h = transformer_block(&h, &self.block("dec", i), c.heads, self.additive.as_ref(), c.ln_eps, drop.as_mut())?;
        }
        let h = h.layer_norm(&self.p("dec_norm.gain"), &self.p("dec_norm.bias"), c.ln_eps)?;
        TokenPyramid::split(&h, &self.schedule)?
            .iter()
            .enumerate()
            .map(|(level, map)| self.pixels(map, level))
            .collect()
    }

    /// Pixel head on a `[B, g, g, D]` map, unfolded to `[B, 3, g·p, g·p]`.
    pub fn pixels(&self, map: &Tensor<T>, level: usize) -> Result<Tensor<T>> {
        let prefix = if self.config.per_scale_heads { format!("pixel_head.{level}") } else { "pixel_head".into() };
        let p = self.config.patch;
        let (b, g) = (map.shape()[0], map.shape()[1]);
        map.matmul(&self.p(&format!("{prefix}.weight")))?
            .add(&self.p(&format!("{prefix}.bias")))?
            .reshape(&[b, g, g, 3, p, p])?
            .permute(&[0, 3, 1, 4, 2, 5])?
            .reshape(&[b, 3, g * p, g * p])
    }

    /// Eval-mode decode of a `[B, g, g, d_z]` latent into one image per level.
    pub fn decode_pyramid(&self, z: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.decode_sequence(&self.decoder_input(z)?.concatenated, None)
    }

    /// Encode, sample (mean in eval mode) and decode.
    pub fn reconstruct(&self, x: &Tensor<T>, mode: Mode<'_>) -> Result<Reconstruction<T>> {
        let code = self.encode(x)?;
        let (z, drop) = match mode {
            Mode::Eval => (code.mu.clone(), None),
            Mode::Train { sample, drop } => (sample_latent(&code, Some(sample))?, Some(drop)),
        };
        let outputs = self.decode_sequence(&self.decoder_input(&z)?.concatenated, drop)?;
        Ok(Reconstruction { outputs, code })
    }

    /// Multi-scale reconstruction loss against the image pyramid of `x`, plus the KL term.
    pub fn loss(&self, x: &Tensor<T>, mode: Mode<'_>, weights: &LossWeights) -> Result<LossBreakdown<T>> {
        let rec = self.reconstruct(x, mode)?;
        let targets = image_pyramid(x, &self.schedule, self.config.patch)?;
        multiscale_loss(&rec.outputs, &targets, Some(&rec.code), weights)
    }

    /// Deterministic base-grid latent used by a downstream generator.
    pub fn latent_for_generation(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encode(x)?.mu.detach())
    }
}

/// `mu` when `rng` is `None`, otherwise `mu + exp(logvar / 2)·ε` with `ε ~ N(0, 1)`.
pub fn sample_latent<T: Real>(code: &LatentCode<T>, rng: Option<&mut SeededRng>) -> Result<Tensor<T>> {
    match rng {
        None => Ok(code.mu.clone()),
        Some(rng) => {
            let eps = Tensor::new(normal(rng, code.mu.numel()), code.mu.shape())?;
            code.mu.add(&code.logvar.scale(0.5).exp().mul(&eps)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionRegime;

    fn tiny() -> TokenizerConfig {
        TokenizerConfig {
            image_size: 8,
            patch: 4,
            enc_layers: 1,
            dec_layers: 1,
            enc_width: 8,
            dec_width: 8,
            heads: 2,
            latent_dim: 4,
            scales: vec![1, 2],
            ..Default::default()
        }
    }

    fn image(b: usize, side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeded(seed, stream::SYNTH);
        let data: Vec<f64> = normal(&mut rng, b * 3 * side * side);
        Tensor::new(data.into_iter().map(|v| v.tanh()).collect(), &[b, 3, side, side]).unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let m = TokenizerModel::<f64>::new(TokenizerConfig { seed: 3, ..Default::default() }).unwrap();
        let x = image(2, 32, 1);
        let code = m.encode(&x).unwrap();
        assert_eq!(code.mu.shape(), &[2, 8, 8, 16]);
        let rec = m.reconstruct(&x, Mode::Eval).unwrap();
        let sides: Vec<usize> = rec.outputs.iter().map(|o| o.shape()[3]).collect();
        assert_eq!(sides, vec![4, 8, 16, 32]);
        assert_eq!(rec.outputs[3].shape(), x.shape());
        assert_eq!(m.decoder_input(&code.mu).unwrap().concatenated.shape(), &[2, 85, 64]);
    }

    #[test]
    fn encode_is_deterministic() {
        let m = TokenizerModel::<f64>::new(tiny()).unwrap();
        let x = image(1, 8, 2);
        let (a, b) = (m.encode(&x).unwrap(), m.encode(&x).unwrap());
        assert_eq!(a.mu.data(), b.mu.data());
        assert_eq!(a.logvar.data(), b.logvar.data());
    }

    #[test]
    fn wrong_image_shape_is_dimension_error() {
        let m = TokenizerModel::<f64>::new(tiny()).unwrap();
        assert!(matches!(m.encode(&image(1, 16, 0)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn param_count_is_config_function() {
        let c = tiny();
        let m = TokenizerModel::<f32>::new(c.clone()).unwrap();
        assert_eq!(m.params.numel(), param_count(&c).unwrap());
        let other = TokenizerModel::<f32>::new(TokenizerConfig { seed: 99, ..c.clone() }).unwrap();
        assert_eq!(other.params.numel(), m.params.numel());
        let interp = TokenizerConfig { downsample: DownsampleMode::Interp, ..c.clone() };
        // one chain [d, d, 2, 2] fewer
        assert_eq!(param_count(&c).unwrap() - param_count(&interp).unwrap(), 8 * 8 * 4);
    }

    #[test]
    fn zero_pixel_head_outputs_bias() {
        let mut m = TokenizerModel::<f64>::new(tiny()).unwrap();
        let n = m.params.get("pixel_head.weight").unwrap().numel();
        m.params.set("pixel_head.weight", vec![0.0; n]).unwrap();
        let bias: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        m.params.set("pixel_head.bias", bias.clone()).unwrap();
        let rec = m.reconstruct(&image(1, 8, 5), Mode::Eval).unwrap();
        for out in &rec.outputs {
            let side = out.shape()[3];
            for c in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let v = out.data()[(c * side + y) * side + x];
                        assert_eq!(v, bias[c * 16 + (y % 4) * 4 + x % 4]);
                    }
                }
            }
        }
    }

    #[test]
    fn latent_for_generation_ignores_decoder_choices() {
        let x = image(1, 8, 4);
        let base = TokenizerModel::<f64>::new(tiny()).unwrap();
        let z = base.latent_for_generation(&x).unwrap();
        for (mode, regime) in [(DownsampleMode::Interp, AttentionRegime::Full), (DownsampleMode::Conv, AttentionRegime::ScaleIndependent)] {
            let cfg = TokenizerConfig { downsample: mode, regime, ..tiny() };
            let mut other = TokenizerModel::<f64>::new(cfg.clone()).unwrap();
            for (name, t) in base.params.iter() {
                if other.params.contains(name) && name.starts_with(['p', 'e', 'l']) {
                    other.params.set(name, t.to_vec()).unwrap();
                }
            }
            other = TokenizerModel::from_params(cfg, other.params).unwrap();
            assert_eq!(other.latent_for_generation(&x).unwrap().data(), z.data());
        }
        let single = TokenizerModel::<f64>::new(tiny().single_scale()).unwrap();
        assert_eq!(single.latent_for_generation(&x).unwrap().shape(), z.shape());
    }

    #[test]
    fn sampling_modes() {
        let code = LatentCode {
            mu: Tensor::new(vec![0.5; 4000], &[1, 20, 20, 10]).unwrap(),
            logvar: Tensor::full(&[1, 20, 20, 10], LOGVAR_MIN),
        };
        assert_eq!(sample_latent(&code, None).unwrap().data(), code.mu.data());
        let mut rng = seeded(1, stream::SAMPLE);
        let s = sample_latent(&code, Some(&mut rng)).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.5).abs() < 1e-5));
        let unit = LatentCode { mu: code.mu.clone(), logvar: Tensor::zeros(&[1, 20, 20, 10]) };
        let mut total = 0.0;
        for _ in 0..3 {
            total += sample_latent(&unit, Some(&mut rng)).unwrap().data().iter().sum::<f64>();
        }
        let mean = total / 12000.0;
        assert!((mean - 0.5).abs() < 3.0 / 12000f64.sqrt(), "{mean}");
    }

    #[test]
    fn logvar_is_clamped() {
        let mut m = TokenizerModel::<f64>::new(tiny()).unwrap();
        let n = m.params.get("latent_head.bias").unwrap().numel();
        m.params.set("latent_head.bias", vec![1e3; n]).unwrap();
        let code = m.encode(&image(1, 8, 1)).unwrap();
        assert!(code.logvar.data().iter().all(|&v| v == LOGVAR_MAX));
    }

    #[test]
    fn per_scale_heads_layout() {
        let cfg = TokenizerConfig { per_scale_heads: true, ..tiny() };
        let m = TokenizerModel::<f64>::new(cfg).unwrap();
        assert!(m.params.contains("pixel_head.1.weight"));
        let rec = m.reconstruct(&image(1, 8, 3), Mode::Eval).unwrap();
        assert_eq!(rec.outputs[1].shape(), &[1, 3, 8, 8]);
    }
}
