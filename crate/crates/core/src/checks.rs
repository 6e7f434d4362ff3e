//! Finite-difference checks over a fixed library of composed operations and
//! over a tiny end-to-end tokenizer.

use crate::attention::{build_mask, masked_mha, transformer_block, AttentionRegime, AttnWeights, BlockParams};
use crate::error::Result;
use crate::numerics::rng::{normal, seeded, stream};
use crate::numerics::{grad_check_many, GradCheckReport, ParamStore, Tensor};
use crate::objectives::LossWeights;
use crate::pyramid::{downsample_conv, ConvChains, ScaleSchedule};
use crate::tokenizer::reference::single_scale_loss;
use crate::tokenizer::{param_shapes, Mode, TokenizerConfig, TokenizerModel};

/// Relative-error bound for single operations and small compositions.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the whole tokenizer loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

type CaseFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

pub struct GradCase {
    pub name: &'static str,
    pub f: CaseFn,
    pub inputs: Vec<Tensor<f64>>,
}

fn rand(rng: &mut crate::numerics::rng::SeededRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = normal(rng, n);
    Tensor::new(data.into_iter().map(|v| v * scale).collect(), shape).expect("valid shape")
}

/// The operation library, with random inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = seeded(seed, stream::EVAL);
    let sq = |t: Tensor<f64>| -> Result<Tensor<f64>> { Ok(t.square().sum()) };
    let schedule = ScaleSchedule::new(4, &[1, 2, 4]).expect("valid schedule");
    let mask = build_mask(&schedule, AttentionRegime::ScaleCausal).additive::<f64>().expect("blocked entries");
    let mask4 = build_mask(&ScaleSchedule::new(2, &[1, 2]).expect("valid"), AttentionRegime::ScaleIndependent)
        .additive::<f64>()
        .expect("blocked entries");
    let m2 = mask.clone();
    let mut cases = vec![
        GradCase {
            name: "add_broadcast_mul",
            f: Box::new(move |x| sq(x[0].add(&x[1])?.mul(&x[0])?)),
            inputs: vec![rand(&mut r, &[3, 4], 1.0), rand(&mut r, &[4], 1.0)],
        },
        GradCase {
            name: "matmul_batched",
            f: Box::new(move |x| sq(x[0].matmul(&x[1])?)),
            inputs: vec![rand(&mut r, &[2, 3, 4], 1.0), rand(&mut r, &[4, 5], 1.0)],
        },
        GradCase {
            name: "bmm_transposed",
            f: Box::new(move |x| sq(x[0].bmm(&x[1], true)?)),
            inputs: vec![rand(&mut r, &[2, 3, 4], 1.0), rand(&mut r, &[2, 5, 4], 1.0)],
        },
        GradCase {
            name: "masked_softmax_square",
            f: Box::new(move |x| sq(x[0].softmax(1, Some(&mask4))?)),
            inputs: vec![rand(&mut r, &[5, 5], 1.0)],
        },
        GradCase {
            name: "softmax_leading_axis",
            f: Box::new(move |x| Ok(x[0].softmax(0, None)?.mul(&x[1])?.sum())),
            inputs: vec![rand(&mut r, &[4, 3], 1.0), rand(&mut r, &[4, 3], 1.0)],
        },
        GradCase {
            name: "layer_norm",
            f: Box::new(move |x| sq(x[0].layer_norm(&x[1], &x[2], 1e-6)?.add_scalar(0.3))),
            inputs: vec![rand(&mut r, &[3, 6], 1.0), rand(&mut r, &[6], 1.0), rand(&mut r, &[6], 1.0)],
        },
        GradCase {
            name: "gelu_exp_clamp",
            f: Box::new(move |x| Ok(x[0].gelu().exp().clamp(-10.0, 10.0).sum())),
            inputs: vec![rand(&mut r, &[7], 1.0)],
        },
        GradCase {
            name: "abs_mean",
            f: Box::new(move |x| Ok(x[0].add_scalar(0.05).abs().mean())),
            inputs: vec![Tensor::new(vec![0.7, -1.1, 0.4, -0.6, 2.0], &[5]).expect("valid")],
        },
        GradCase {
            name: "conv2d_layer_norm_mean",
            f: Box::new(move |x| {
                let y = x[0].conv2d(&x[1], 2)?.permute(&[0, 2, 3, 1])?;
                let g = Tensor::full(&[3], 1.0);
                let b = Tensor::zeros(&[3]);
                Ok(y.layer_norm(&g, &b, 1e-6)?.mul(&y)?.mean())
            }),
            inputs: vec![rand(&mut r, &[1, 2, 4, 4], 1.0), rand(&mut r, &[3, 2, 2, 2], 1.0)],
        },
        GradCase {
            name: "area_pool_fractional",
            f: Box::new(move |x| sq(x[0].area_pool(3, 2)?)),
            inputs: vec![rand(&mut r, &[1, 2, 4, 5], 1.0)],
        },
        GradCase {
            name: "permute_slice_concat_reshape",
            f: Box::new(move |x| {
                let p = x[0].permute(&[2, 0, 1])?;
                let parts = [p.slice(0, 1, 2)?, x[1].clone()];
                sq(Tensor::concat(&parts, 0)?.reshape(&[4, 6])?.scale(0.5))
            }),
            inputs: vec![rand(&mut r, &[2, 3, 4], 1.0), rand(&mut r, &[2, 2, 3], 1.0)],
        },
        GradCase {
            name: "mul_rows",
            f: Box::new(move |x| sq(x[0].mul_rows(&[1.5, 0.0, 2.0])?)),
            inputs: vec![rand(&mut r, &[3, 2], 1.0)],
        },
        GradCase {
            name: "masked_attention",
            f: Box::new(move |x| {
                let w = AttnWeights { qkv: x[1].clone(), proj: x[2].clone() };
                sq(masked_mha(&x[0], &w, 2, Some(&m2))?)
            }),
            inputs: vec![rand(&mut r, &[2, 21, 4], 1.0), rand(&mut r, &[4, 12], 0.5), rand(&mut r, &[4, 4], 0.5)],
        },
        GradCase {
            name: "transformer_block",
            f: Box::new(move |x| {
                let p = BlockParams {
                    ln1_gain: x[1].clone(),
                    ln1_bias: x[2].clone(),
                    attn: AttnWeights { qkv: x[3].clone(), proj: x[4].clone() },
                    ln2_gain: x[5].clone(),
                    ln2_bias: x[6].clone(),
                    fc1: x[7].clone(),
                    fc2: x[8].clone(),
                };
                sq(transformer_block(&x[0], &p, 2, Some(&mask), 1e-6, None)?)
            }),
            inputs: vec![
                rand(&mut r, &[1, 21, 4], 1.0),
                rand(&mut r, &[4], 1.0).add_scalar(1.0),
                rand(&mut r, &[4], 0.1),
                rand(&mut r, &[4, 12], 0.5),
                rand(&mut r, &[4, 4], 0.5),
                rand(&mut r, &[4], 1.0).add_scalar(1.0),
                rand(&mut r, &[4], 0.1),
                rand(&mut r, &[4, 8], 0.5),
                rand(&mut r, &[8, 4], 0.5),
            ],
        },
    ];
    let chain_schedule = ScaleSchedule::new(4, &[1, 4]).expect("valid");
    cases.push(GradCase {
        name: "conv_downsample_chain",
        f: Box::new(move |x| {
            let chains = ConvChains { levels: vec![vec![x[1].clone(), x[2].clone()]] };
            sq(downsample_conv(&chains, &x[0], &chain_schedule)?.concatenated)
        }),
        inputs: vec![rand(&mut r, &[1, 4, 4, 3], 1.0), rand(&mut r, &[3, 3, 2, 2], 0.5), rand(&mut r, &[3, 3, 2, 2], 0.5)],
    });
    cases
}

/// Runs every library case; returns `(name, report)` pairs.
pub fn run_op_cases(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_cases(seed)
        .into_iter()
        .map(|c| Ok((c.name, grad_check_many(&c.f, &c.inputs, 1e-5, None)?)))
        .collect()
}

/// 8 px images, patch 4, grids 1 and 2, width 8. Weights are drawn wider
/// than the training default so that no gradient sits at the level of
/// finite-difference round-off.
pub fn tiny_config() -> TokenizerConfig {
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
        init_std: 0.25,
        ..Default::default()
    }
}

/// Gradient check of the full training loss (latent sampling and drop path
/// included, with fixed noise) with respect to every parameter.
pub fn end_to_end_check(config: &TokenizerConfig, seed: u64, stride: Option<usize>) -> Result<GradCheckReport> {
    let model = TokenizerModel::<f64>::new(config.clone())?;
    let names: Vec<String> = param_shapes(config)?.into_iter().map(|(n, _)| n).collect();
    let mut inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.detach()).collect();
    let side = config.image_size;
    let mut r = seeded(seed, stream::SYNTH);
    let x = rand(&mut r, &[2, 3, side, side], 1.0);
    let x = Tensor::new(x.data().iter().map(|v| v.tanh()).collect(), x.shape())?;
    inputs.push(x);
    let weights = LossWeights { kl: 1e-2, ..Default::default() };
    let cfg = config.clone();
    let f = move |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut store = ParamStore::new();
        for (name, t) in names.iter().zip(xs) {
            store.insert_tensor(name.clone(), t.clone())?;
        }
        let m = TokenizerModel::from_params(cfg.clone(), store)?;
        let (mut s, mut d) = (seeded(seed, stream::SAMPLE), seeded(seed, stream::DROP_PATH));
        Ok(m.loss(&xs[xs.len() - 1], Mode::Train { sample: &mut s, drop: &mut d }, &weights)?.total)
    };
    grad_check_many(f, &inputs, 1e-5, stride)
}

/// Eval-mode leakage table: entry `[p][s]` is true when adding noise to the
/// decoder-input tokens of level `p` changed any output pixel of level `s`.
pub fn cross_scale_leakage(model: &TokenizerModel<f64>, x: &Tensor<f64>, seed: u64) -> Result<Vec<Vec<bool>>> {
    let schedule = model.schedule().clone();
    let z = model.encode(x)?.mu;
    let seq = model.decoder_input(&z)?.concatenated;
    let base = model.decode_sequence(&seq, None)?;
    let (b, total, d) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    let mut r = seeded(seed, stream::EVAL);
    let mut table = Vec::with_capacity(schedule.levels());
    for (&off, &count) in schedule.offsets().iter().zip(&schedule.counts()) {
        let mut data = seq.to_vec();
        let noise: Vec<f64> = normal(&mut r, b * count * d);
        for bi in 0..b {
            let start = (bi * total + off) * d;
            for (v, e) in data[start..start + count * d].iter_mut().zip(&noise[bi * count * d..]) {
                *v += e;
            }
        }
        let outs = model.decode_sequence(&Tensor::new(data, seq.shape())?, None)?;
        table.push(outs.iter().zip(&base).map(|(o, b)| o.data() != b.data()).collect());
    }
    Ok(table)
}

/// Multi-scale loss and single-scale reference loss on a one-level config,
/// in training mode with identical noise streams.
pub fn degenerate_pair(config: &TokenizerConfig, x: &Tensor<f64>, noise_seed: u64) -> Result<(f64, f64)> {
    let model = TokenizerModel::<f64>::new(config.single_scale())?;
    let weights = LossWeights { kl: config.kl_weight, ..Default::default() };
    let run = |reference: bool| -> Result<f64> {
        let (mut s, mut d) = (seeded(noise_seed, stream::SAMPLE), seeded(noise_seed, stream::DROP_PATH));
        let mode = Mode::Train { sample: &mut s, drop: &mut d };
        Ok(if reference {
            single_scale_loss(&model, x, mode, &weights)?.item()
        } else {
            model.loss(x, mode, &weights)?.total.item()
        })
    };
    Ok((run(false)?, run(true)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_library_passes() {
        for (name, report) in run_op_cases(1).unwrap() {
            assert!(report.max_rel_error < OP_TOLERANCE, "{name}: {report:?}");
        }
    }

    #[test]
    fn tiny_model_passes() {
        let report = end_to_end_check(&tiny_config(), 3, None).unwrap();
        assert!(report.max_rel_error < END_TO_END_TOLERANCE, "{report:?}");
    }
}
