//! Reconstruction and KL losses, multi-scale aggregation, AdamW and the
//! warmup-cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};
use crate::tokenizer::LatentCode;

/// Loss weights. Perceptual and adversarial terms are not implemented; their
/// slots exist for configuration compatibility and must stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub kl: f64,
    /// Relative weight of each pyramid level; equal weights when `None`.
    pub scale_weights: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, mse: 0.4, perceptual: 0.0, adversarial: 0.0, kl: 1e-6, scale_weights: None }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("mse", self.mse), ("kl", self.kl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name}={v} must be finite and nonnegative")));
            }
        }
        if self.perceptual != 0.0 {
            return Err(Error::Config("perceptual loss is not available; lpips_weight must be 0".into()));
        }
        if self.adversarial != 0.0 {
            return Err(Error::Config("adversarial loss is not available; gan_weight must be 0".into()));
        }
        if let Some(ws) = &self.scale_weights {
            if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || ws.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("invalid per-scale weights {ws:?}")));
            }
        }
        Ok(())
    }
}

/// `l1·mean|pred − target| + mse·mean((pred − target)²)`.
pub fn rec_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, w: &LossWeights) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension { op: "rec_loss", lhs: pred.shape().to_vec(), rhs: target.shape().to_vec() });
    }
    let diff = pred.sub(target)?;
    let mut terms = Vec::with_capacity(2);
    if w.l1 != 0.0 {
        terms.push(diff.abs().mean().scale(w.l1));
    }
    if w.mse != 0.0 {
        terms.push(diff.square().mean().scale(w.mse));
    }
    match terms.len() {
        0 => Ok(Tensor::scalar(T::zero())),
        1 => Ok(terms.pop().unwrap()),
        _ => terms[0].add(&terms[1]),
    }
}

/// Mean over all elements of `−½(1 + logvar − mu² − exp(logvar))`.
pub fn kl_loss<T: Real>(code: &LatentCode<T>) -> Result<Tensor<T>> {
    if let Some(v) = code.logvar.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("kl_loss: non-finite logvar {v}")));
    }
    let inner = code.logvar.add_scalar(1.0).sub(&code.mu.square())?.sub(&code.logvar.exp())?;
    Ok(inner.mean().scale(-0.5))
}

/// Total loss plus its per-level parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T: Real> {
    pub total: Tensor<T>,
    pub per_scale: Vec<f64>,
    pub kl: f64,
}

/// Weighted mean of per-level reconstruction losses plus the weighted KL term.
///
/// Each level is compared at its own resolution against the matching level of
/// the image pyramid.
pub fn multiscale_loss<T: Real>(
    outputs: &[Tensor<T>],
    targets: &[Tensor<T>],
    code: Option<&LatentCode<T>>,
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(Error::Shape(format!("{} output levels for {} target levels", outputs.len(), targets.len())));
    }
    let weights = match &w.scale_weights {
        Some(ws) if ws.len() != outputs.len() => {
            return Err(Error::Config(format!("{} per-scale weights for {} levels", ws.len(), outputs.len())))
        }
        Some(ws) => ws.clone(),
        None => vec![1.0; outputs.len()],
    };
    let uniform = weights.windows(2).all(|p| p[0] == p[1]);
    let mut per_scale = Vec::with_capacity(outputs.len());
    let mut acc: Option<Tensor<T>> = None;
    for ((out, target), &ws) in outputs.iter().zip(targets).zip(&weights) {
        let rec = rec_loss(out, target, w)?;
        per_scale.push(rec.item().as_f64());
        let term = if uniform { rec } else { rec.scale(ws) };
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    let norm = if uniform { outputs.len() as f64 } else { weights.iter().sum() };
    let mut total = acc.expect("at least one level").scale(1.0 / norm);
    let mut kl = 0.0;
    if let Some(code) = code {
        let k = kl_loss(code)?;
        kl = k.item().as_f64();
        if w.kl != 0.0 {
            total = total.add(&k.scale(w.kl))?;
        }
    }
    Ok(LossBreakdown { total, per_scale, kl })
}

/// Linear warmup from 0 to `lr_start`, then cosine annealing to `lr_end`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_ratio: f64, lr_start: f64, lr_end: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).round() as usize;
    if step < warmup {
        return lr_start * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return lr_start;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments for every parameter of a store, plus the step count.
#[derive(Debug, Clone)]
pub struct OptimState<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        OptimState { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
pub fn adamw_step<T: Real>(state: &mut OptimState<T>, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.len() != p.numel() {
            return Err(Error::Dimension { op: "adamw_step", lhs: p.shape().to_vec(), rhs: vec![g.len()] });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let decay = T::lit(1.0 - lr * c.weight_decay);
    let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for (i, name) in names.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = params.get(name)?.to_vec();
        for j in 0..data.len() {
            let gj = grads[i][j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let mhat = m[j] * inv_bc1;
            let vhat = v[j] * inv_bc2;
            data[j] = data[j] * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
        params.set(name, data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), shape).unwrap()
    }

    #[test]
    fn rec_loss_cases() {
        let w = LossWeights::default();
        let x = t(&[-1.0, -0.5, 0.0, 0.5, 0.9], &[5]);
        assert_eq!(rec_loss(&x, &x, &w).unwrap().item(), 0.0);
        let shifted = x.add_scalar(0.1);
        let v = rec_loss(&shifted, &x, &w).unwrap().item();
        assert!((v - 0.104).abs() < 1e-6, "{v}");
        let zero = LossWeights { l1: 0.0, mse: 0.0, ..w.clone() };
        assert_eq!(rec_loss(&shifted, &x, &zero).unwrap().item(), 0.0);
        assert!(rec_loss(&x, &t(&[0.0; 4], &[4]), &w).is_err());
    }

    fn code(mu: f64, logvar: f64) -> LatentCode<f64> {
        LatentCode { mu: Tensor::full(&[1, 2, 2, 3], mu), logvar: Tensor::full(&[1, 2, 2, 3], logvar) }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_loss(&code(0.0, 0.0)).unwrap().item(), 0.0);
        assert!((kl_loss(&code(1.0, 0.0)).unwrap().item() - 0.5).abs() < 1e-12);
        let expect = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_loss(&code(0.0, 2f64.ln())).unwrap().item() - expect).abs() < 1e-12);
        assert!((expect - 0.1534).abs() < 1e-4);
        assert!(matches!(kl_loss(&code(0.0, f64::NAN)), Err(Error::Numeric(_))));
    }

    #[test]
    fn multiscale_mean_of_levels() {
        let w = LossWeights { kl: 0.0, ..Default::default() };
        let a = (t(&[0.1, 0.2], &[2]), t(&[0.0, 0.0], &[2]));
        let b = (t(&[1.0], &[1]), t(&[0.5], &[1]));
        let la = rec_loss(&a.0, &a.1, &w).unwrap().item();
        let lb = rec_loss(&b.0, &b.1, &w).unwrap().item();
        let out = multiscale_loss(&[a.0, b.0], &[a.1, b.1], None, &w).unwrap();
        assert!((out.total.item() - (la + lb) / 2.0).abs() < 1e-15);
        assert_eq!(out.per_scale, vec![la, lb]);
    }

    #[test]
    fn perfect_levels_leave_only_kl() {
        let w = LossWeights::default();
        let x = t(&[0.3, 0.4], &[2]);
        let c = code(1.0, 0.0);
        let out = multiscale_loss(&[x.clone(), x.clone()], &[x.clone(), x], Some(&c), &w).unwrap();
        assert!((out.total.item() - 1e-6 * 0.5).abs() < 1e-18);
    }

    #[test]
    fn level_count_mismatch() {
        let x = t(&[0.0], &[1]);
        assert!(multiscale_loss(&[x.clone()], &[x.clone(), x], None, &LossWeights::default()).is_err());
    }

    #[test]
    fn disabled_terms_are_rejected() {
        assert!(LossWeights { perceptual: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { adversarial: 0.6, ..Default::default() }.validate().is_err());
        assert!(LossWeights { l1: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn cosine_schedule_boundaries() {
        let (total, ratio, a, b) = (1000, 0.03, 4e-4, 4e-6);
        assert_eq!(cosine_lr(0, total, ratio, a, b), 0.0);
        assert_eq!(cosine_lr(30, total, ratio, a, b), a);
        assert_eq!(cosine_lr(total, total, ratio, a, b), b);
        let mid = 30 + (total - 30) / 2;
        assert!((cosine_lr(mid, total, ratio, a, b) - (a + b) / 2.0).abs() < 1e-12);
        assert!((cosine_lr(15, total, ratio, a, b) - a / 2.0).abs() < 1e-15);
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", vec![v], &[1]).unwrap();
        s
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut p = scalar_store(1.5);
        let mut st = OptimState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        adamw_step(&mut st, &mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let mut st = OptimState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        adamw_step(&mut st, &mut p, &[vec![1.0]], 0.1).unwrap();
        // bias-corrected moments are 1 and 1: update = lr / (1 + eps)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_pure_decay() {
        let mut p = scalar_store(2.0);
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        adamw_step(&mut st, &mut p, &[vec![0.0]], 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn adamw_nan_names_parameter() {
        let mut p = scalar_store(2.0);
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        let err = adamw_step(&mut st, &mut p, &[vec![f64::NAN]], 0.1).unwrap_err();
        assert!(err.to_string().contains("parameter w"));
    }

    #[test]
    fn adamw_decreases_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", vec![0.7, -1.3, 2.0], &[3]).unwrap();
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        let f = |p: &ParamStore<f64>| p.get("x").unwrap().data().iter().map(|v| v * v).sum::<f64>();
        let before = f(&p);
        let x = p.get("x").unwrap().clone();
        x.square().sum().backward().unwrap();
        let grads = p.grads();
        adamw_step(&mut st, &mut p, &grads, 1e-3).unwrap();
        assert!(f(&p) < before);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1f64]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
