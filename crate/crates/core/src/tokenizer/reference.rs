//! Plain single-scale tokenizer loss written without pyramids or masks, used
//! to cross-check the multi-scale path on one-level schedules.

use super::{sample_latent, Mode, TokenizerModel};
use crate::attention::{transformer_block, DropPath};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::objectives::{kl_loss, rec_loss, LossWeights};

/// `rec_loss(D(z), x) + kl·KL` for a model whose schedule has one level and
/// whose attention is unmasked.
pub fn single_scale_loss<T: Real>(
    model: &TokenizerModel<T>,
    x: &Tensor<T>,
    mode: Mode<'_>,
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    let c = &model.config;
    if model.schedule().levels() != 1 || !model.mask().is_full() {
        return Err(Error::Config("reference path needs a single full-attention level".into()));
    }
    let code = model.encode(x)?;
    let (z, drop_rng) = match mode {
        Mode::Eval => (code.mu.clone(), None),
        Mode::Train { sample, drop } => (sample_latent(&code, Some(sample))?, Some(drop)),
    };
    let (b, g, d, p) = (x.shape()[0], c.base_grid(), c.dec_width, c.patch);
    let spatial = model.p("dec_pe.spatial");
    let scale = model.p("dec_pe.scale").reshape(&[d])?;
    let mut h = z
        .matmul(&model.p("latent_proj.weight"))?
        .add(&model.p("latent_proj.bias"))?
        .add(&spatial.add(&scale)?)?
        .reshape(&[b, g * g, d])?;
    let mut drop = match drop_rng {
        Some(rng) if c.drop_path > 0.0 => Some(DropPath { rate: c.drop_path, rng }),
        _ => None,
    };
    for i in 0..c.dec_layers {
        h = transformer_block(&h, &model.block("dec", i), c.heads, None, c.ln_eps, drop.as_mut())?;
    }
    let head = if c.per_scale_heads { "pixel_head.0" } else { "pixel_head" };
    let out = h
        .layer_norm(&model.p("dec_norm.gain"), &model.p("dec_norm.bias"), c.ln_eps)?
        .reshape(&[b, g, g, d])?
        .matmul(&model.p(&format!("{head}.weight")))?
        .add(&model.p(&format!("{head}.bias")))?
        .reshape(&[b, g, g, 3, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[b, 3, g * p, g * p])?;
    let rec = rec_loss(&out, x, weights)?;
    if weights.kl == 0.0 {
        return Ok(rec);
    }
    rec.add(&kl_loss(&code)?.scale(weights.kl))
}
