//! Single-scale versus multi-scale training under the same budget.

use std::io::{self, Write};

use mstok_core::attention::AttentionRegime;
use mstok_core::tokenizer::DownsampleMode;
use mstok_core::Result;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::train::{load_dataset, train, EvalReport};

/// One finished run of the comparison.
#[derive(Debug, Clone)]
pub struct Arm {
    pub seed: u64,
    pub initial: EvalReport,
    pub last: EvalReport,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub single: Vec<Arm>,
    pub multi: Vec<Arm>,
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Median-level summary of one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub l1: f64,
    pub top_rec_loss: f64,
    pub psnr: f64,
    pub density_cv: f64,
    pub gini: f64,
    pub norm_entropy: f64,
}

pub fn summarize(arms: &[Arm]) -> Summary {
    let pick = |f: &dyn Fn(&EvalReport) -> f64| median(&arms.iter().map(|a| f(&a.last)).collect::<Vec<_>>());
    let stat = |f: fn(&mstok_core::latentlab::LatentStats) -> f64| pick(&|r: &EvalReport| r.latent.as_ref().map_or(f64::NAN, f));
    Summary {
        l1: pick(&|r| r.l1),
        top_rec_loss: pick(&|r| r.top_rec_loss),
        psnr: pick(&|r| r.psnr),
        density_cv: stat(|s| s.density_cv),
        gini: stat(|s| s.gini),
        norm_entropy: stat(|s| s.norm_entropy),
    }
}

/// The single-scale arm: only the top grid, full attention.
pub fn single_scale_arm(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model = base.model.single_scale();
    cfg
}

/// The multi-scale arm: the base config's scales with conv downsampling and
/// scale-causal attention.
pub fn multi_scale_arm(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.downsample = DownsampleMode::Conv;
    cfg.model.regime = AttentionRegime::ScaleCausal;
    cfg
}

/// Trains both arms for every seed. Progress goes to `progress` one line per run.
pub fn compare(base: &RunConfig, seeds: &[u64], progress: &mut dyn Write) -> Result<Comparison> {
    let mut result = Comparison { single: Vec::new(), multi: Vec::new() };
    for &seed in seeds {
        for (multi, arm) in [(false, single_scale_arm(base)), (true, multi_scale_arm(base))] {
            let mut cfg = arm;
            cfg.model.seed = seed;
            let data = load_dataset(&cfg)?;
            let out = train(&cfg, &data, &mut io::sink())?;
            let record = Arm { seed, initial: out.initial, last: out.last };
            writeln!(progress, "{}", arm_json(if multi { "multi" } else { "single" }, &record))?;
            if multi {
                result.multi.push(record);
            } else {
                result.single.push(record);
            }
        }
    }
    Ok(result)
}

pub fn arm_json(name: &str, arm: &Arm) -> Value {
    json!({ "arm": name, "seed": arm.seed, "initial": arm.initial.to_json(), "final": arm.last.to_json() })
}

pub fn summary_json(s: &Summary) -> Value {
    json!({
        "l1": s.l1,
        "top_rec_loss": s.top_rec_loss,
        "psnr": s.psnr,
        "density_cv": s.density_cv,
        "gini": s.gini,
        "norm_entropy": s.norm_entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 5.0]), 5.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn arms_differ_only_in_scale_setup() {
        let base = RunConfig::default();
        let single = single_scale_arm(&base);
        let multi = multi_scale_arm(&base);
        assert_eq!(single.model.scales, vec![8]);
        assert_eq!(multi.model.scales, vec![1, 2, 4, 8]);
        assert_eq!(single.steps, multi.steps);
        assert_eq!(single.model.enc_width, multi.model.enc_width);
    }
}
