//! Scale-aware attention masks, masked multi-head attention and pre-norm
//! transformer blocks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::rng::{uniform, SeededRng};
use crate::numerics::{Real, Tensor, MASKED};
use crate::pyramid::ScaleSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionRegime {
    /// Every token sees every token.
    Full,
    /// Tokens see only tokens of their own scale.
    ScaleIndependent,
    /// Tokens see their own scale and all coarser scales.
    ScaleCausal,
}

impl AttentionRegime {
    pub const ALL: [AttentionRegime; 3] =
        [AttentionRegime::Full, AttentionRegime::ScaleIndependent, AttentionRegime::ScaleCausal];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionRegime::Full => "full",
            AttentionRegime::ScaleIndependent => "scaleindependent",
            AttentionRegime::ScaleCausal => "scalecausal",
        }
    }

    /// Whether a query at `q_level` may attend to a key at `k_level`.
    pub fn allows(self, q_level: usize, k_level: usize) -> bool {
        match self {
            AttentionRegime::Full => true,
            AttentionRegime::ScaleIndependent => q_level == k_level,
            AttentionRegime::ScaleCausal => k_level <= q_level,
        }
    }
}

impl fmt::Display for AttentionRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        match norm.as_str() {
            "full" => Ok(AttentionRegime::Full),
            "scaleindependent" => Ok(AttentionRegime::ScaleIndependent),
            "scalecausal" => Ok(AttentionRegime::ScaleCausal),
            _ => Err(Error::Config(format!(
                "unknown attention regime {s:?} (expected full, scaleindependent or scalecausal)"
            ))),
        }
    }
}

/// Boolean visibility matrix over the concatenated pyramid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allow: Vec<bool>,
    size: usize,
    pub regime: AttentionRegime,
    pub schedule: ScaleSchedule,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.size + key]
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// `[T, T]` additive mask (0 or [`MASKED`]); `None` when nothing is blocked.
    pub fn additive<T: Real>(&self) -> Option<Tensor<T>> {
        if self.is_full() {
            return None;
        }
        let data = self.allow.iter().map(|&a| if a { T::zero() } else { T::lit(MASKED) }).collect();
        Some(Tensor::new(data, &[self.size, self.size]).expect("square mask"))
    }

    /// One line of `0`/`1` characters per query row.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.size * (self.size + 1));
        for row in self.allow.chunks(self.size) {
            out.extend(row.iter().map(|&a| if a { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

/// Builds the visibility mask for `regime` over `schedule`.
///
/// Scale blocks are contiguous and ascending, so each row is a run of allowed
/// blocks: `[own block]` for scale-independent, `[0, end of own block)` for
/// scale-causal.
pub fn build_mask(schedule: &ScaleSchedule, regime: AttentionRegime) -> AttentionMask {
    let size = schedule.total();
    let counts = schedule.counts();
    let offsets = schedule.offsets();
    let mut allow = vec![false; size * size];
    for (level, (&start, &count)) in offsets.iter().zip(&counts).enumerate() {
        let (lo, hi) = match regime {
            AttentionRegime::Full => (0, size),
            AttentionRegime::ScaleIndependent => (start, start + count),
            AttentionRegime::ScaleCausal => (0, start + count),
        };
        for q in start..start + count {
            allow[q * size + lo..q * size + hi].fill(true);
        }
        debug_assert!(count > 0, "level {level} is empty");
    }
    AttentionMask { allow, size, regime, schedule: schedule.clone() }
}

/// Projection weights of one attention layer (no biases).
#[derive(Debug, Clone)]
pub struct AttnWeights<T: Real> {
    /// `[d, 3d]`, columns ordered q, k, v.
    pub qkv: Tensor<T>,
    /// `[d, d]`
    pub proj: Tensor<T>,
}

/// Attention output together with the per-head weights `[B, heads, T, T]`.
pub struct AttentionTrace<T: Real> {
    pub output: Tensor<T>,
    pub weights: Tensor<T>,
}

/// Multi-head scaled dot-product attention over `x: [B, T, d]`.
pub fn masked_mha<T: Real>(
    x: &Tensor<T>,
    w: &AttnWeights<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    Ok(masked_mha_trace(x, w, heads, mask)?.output)
}

pub fn masked_mha_trace<T: Real>(
    x: &Tensor<T>,
    w: &AttnWeights<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<AttentionTrace<T>> {
    if x.rank() != 3 {
        return Err(Error::Dimension { op: "masked_mha", lhs: x.shape().to_vec(), rhs: w.qkv.shape().to_vec() });
    }
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if m.shape() != [t, t] {
            return Err(Error::Dimension { op: "masked_mha", lhs: vec![t, t], rhs: m.shape().to_vec() });
        }
    }
    let dh = d / heads;
    let qkv = x.matmul(&w.qkv)?.reshape(&[b, t, 3, heads, dh])?.permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| qkv.slice(0, i, 1)?.reshape(&[b, heads, t, dh]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q.bmm(&k, true)?.scale(1.0 / (dh as f64).sqrt());
    let weights = scores.softmax(3, mask)?;
    let output = weights
        .bmm(&v, false)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, d])?
        .matmul(&w.proj)?;
    Ok(AttentionTrace { output, weights })
}

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams<T: Real> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub attn: AttnWeights<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    /// `[d, ratio·d]`
    pub fc1: Tensor<T>,
    /// `[ratio·d, d]`
    pub fc2: Tensor<T>,
}

/// Stochastic depth applied independently to every token row of a residual branch.
pub struct DropPath<'a> {
    pub rate: f64,
    pub rng: &'a mut SeededRng,
}

impl DropPath<'_> {
    fn apply<T: Real>(&mut self, branch: Tensor<T>) -> Result<Tensor<T>> {
        if self.rate <= 0.0 {
            return Ok(branch);
        }
        let cols = *branch.shape().last().unwrap();
        let rows = branch.numel() / cols;
        let keep = 1.0 - self.rate;
        let factors: Vec<T> = (0..rows)
            .map(|_| if uniform(self.rng) < keep { T::lit(1.0 / keep) } else { T::zero() })
            .collect();
        branch.mul_rows(&factors)
    }
}

/// `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
pub fn transformer_block<T: Real>(
    x: &Tensor<T>,
    p: &BlockParams<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
    eps: f64,
    mut drop: Option<&mut DropPath<'_>>,
) -> Result<Tensor<T>> {
    let a = masked_mha(&x.layer_norm(&p.ln1_gain, &p.ln1_bias, eps)?, &p.attn, heads, mask)?;
    let a = match drop.as_deref_mut() {
        Some(d) => d.apply(a)?,
        None => a,
    };
    let h = x.add(&a)?;
    let m = h.layer_norm(&p.ln2_gain, &p.ln2_bias, eps)?.matmul(&p.fc1)?.gelu().matmul(&p.fc2)?;
    let m = match drop {
        Some(d) => d.apply(m)?,
        None => m,
    };
    h.add(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal, seeded};

    fn oracle(schedule: &ScaleSchedule, regime: AttentionRegime) -> Vec<bool> {
        let t = schedule.total();
        let mut out = Vec::with_capacity(t * t);
        for q in 0..t {
            for k in 0..t {
                out.push(regime.allows(schedule.level_of(q), schedule.level_of(k)));
            }
        }
        out
    }

    #[test]
    fn two_level_masks() {
        let s = ScaleSchedule::new(2, &[1, 2]).unwrap();
        let causal = build_mask(&s, AttentionRegime::ScaleCausal);
        assert_eq!(causal.to_text(), "10000\n11111\n11111\n11111\n11111\n");
        let indep = build_mask(&s, AttentionRegime::ScaleIndependent);
        assert_eq!(indep.to_text(), "10000\n01111\n01111\n01111\n01111\n");
        let full = build_mask(&s, AttentionRegime::Full);
        assert!(full.is_full());
        assert!(full.additive::<f32>().is_none());
        for regime in AttentionRegime::ALL {
            assert_eq!(build_mask(&s, regime).allow, oracle(&s, regime));
        }
    }

    #[test]
    fn regime_parsing() {
        for r in AttentionRegime::ALL {
            assert_eq!(r.to_string().parse::<AttentionRegime>().unwrap(), r);
        }
        assert_eq!("Scale-Causal".parse::<AttentionRegime>().unwrap(), AttentionRegime::ScaleCausal);
        assert!("causal".parse::<AttentionRegime>().is_err());
    }

    fn eye(d: usize) -> Tensor<f64> {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        Tensor::new(v, &[d, d]).unwrap()
    }

    #[test]
    fn single_token_returns_value_projection() {
        let d = 4;
        let mut qkv = vec![0.0; d * 3 * d];
        for i in 0..d {
            for j in 0..3 {
                qkv[i * 3 * d + j * d + i] = 1.0;
            }
        }
        let w = AttnWeights { qkv: Tensor::new(qkv, &[d, 3 * d]).unwrap(), proj: eye(d) };
        let x = Tensor::new(vec![0.3, -1.0, 2.0, 0.5], &[1, 1, d]).unwrap();
        let y = masked_mha(&x, &w, 2, None).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let w = AttnWeights { qkv: Tensor::zeros(&[6, 18]), proj: Tensor::zeros(&[6, 6]) };
        let x = Tensor::<f64>::zeros(&[1, 2, 6]);
        assert!(matches!(masked_mha(&x, &w, 4, None), Err(Error::Config(_))));
    }

    #[test]
    fn weights_sum_to_one_over_allowed() {
        let s = ScaleSchedule::new(4, &[1, 2, 4]).unwrap();
        let t = s.total();
        let d = 8;
        let mut rng = seeded(3, 9);
        let w = AttnWeights {
            qkv: Tensor::new(normal(&mut rng, d * 3 * d), &[d, 3 * d]).unwrap(),
            proj: Tensor::new(normal(&mut rng, d * d), &[d, d]).unwrap(),
        };
        let x = Tensor::new(normal(&mut rng, 2 * t * d), &[2, t, d]).unwrap();
        for regime in AttentionRegime::ALL {
            let mask = build_mask(&s, regime);
            let trace = masked_mha_trace(&x, &w, 2, mask.additive().as_ref()).unwrap();
            for (r, row) in trace.weights.data().chunks(t).enumerate() {
                let q = r % t;
                let allowed: f64 = row.iter().enumerate().filter(|(k, _)| mask.allowed(q, *k)).map(|(_, v)| v).sum();
                assert!((allowed - 1.0).abs() < 1e-6);
                assert!(row.iter().enumerate().all(|(k, v)| mask.allowed(q, k) || *v == 0.0));
            }
        }
    }

    #[test]
    fn zero_branches_are_identity() {
        let d = 4;
        let p = BlockParams {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            attn: AttnWeights { qkv: Tensor::zeros(&[d, 3 * d]), proj: Tensor::zeros(&[d, d]) },
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            fc1: Tensor::zeros(&[d, 4 * d]),
            fc2: Tensor::zeros(&[4 * d, d]),
        };
        let x = Tensor::new((0..12).map(|i| i as f64 * 0.3 - 1.0).collect(), &[1, 3, d]).unwrap();
        let y = transformer_block(&x, &p, 2, None, 1e-6, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn drop_path_zero_rate_is_deterministic() {
        let d = 4;
        let mut rng = seeded(5, 1);
        let mut w = |n: usize, shape: &[usize]| Tensor::new(normal::<f64>(&mut rng, n), shape).unwrap();
        let p = BlockParams {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            attn: AttnWeights { qkv: w(d * 3 * d, &[d, 3 * d]), proj: w(d * d, &[d, d]) },
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            fc1: w(d * 4 * d, &[d, 4 * d]),
            fc2: w(4 * d * d, &[4 * d, d]),
        };
        let x = Tensor::new((0..12).map(|i| (i as f64).sin()).collect(), &[1, 3, d]).unwrap();
        let mut r1 = seeded(1, 1);
        let mut r2 = seeded(2, 2);
        let a = transformer_block(&x, &p, 2, None, 1e-6, Some(&mut DropPath { rate: 0.0, rng: &mut r1 })).unwrap();
        let b = transformer_block(&x, &p, 2, None, 1e-6, Some(&mut DropPath { rate: 0.0, rng: &mut r2 })).unwrap();
        let c = transformer_block(&x, &p, 2, None, 1e-6, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }
}
