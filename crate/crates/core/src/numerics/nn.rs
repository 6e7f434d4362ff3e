use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Additive mask value for blocked positions.
pub const MASKED: f64 = -1e9;

/// Mask entries at or below this are treated as blocked.
const BLOCKED_BELOW: f64 = MASKED * 0.5;

impl<T: Real> Tensor<T> {
    /// Softmax along `axis` with an optional additive mask.
    ///
    /// The mask shape must be a suffix of `self`'s shape. Positions whose mask
    /// value is at or below `MASKED / 2` receive exactly zero weight; rows with
    /// every position blocked output zeros.
    pub fn softmax(&self, axis: usize, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::Index { op: "softmax", index: axis, bound: rank });
        }
        if let Some(m) = mask {
            let s = self.shape();
            let ms = m.shape();
            if ms.len() > s.len() || s[s.len() - ms.len()..] != *ms {
                return Err(Error::Dimension { op: "softmax", lhs: s.to_vec(), rhs: ms.to_vec() });
            }
        }
        let dim = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let blocked_below = T::lit(BLOCKED_BELOW);
        let mask_vals = mask.map(|m| m.data());
        let ml = mask.map(|m| m.numel()).unwrap_or(1);
        let mut y = vec![T::zero(); x.len()];
        let mut z = vec![T::zero(); dim];
        let mut live = vec![false; dim];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut max = T::neg_infinity();
                let mut any = false;
                for j in 0..dim {
                    let idx = base + j * inner;
                    let add = mask_vals.map(|m| m[idx % ml]).unwrap_or(T::zero());
                    live[j] = add > blocked_below;
                    z[j] = x[idx] + add;
                    if live[j] {
                        any = true;
                        if z[j] > max {
                            max = z[j];
                        }
                    }
                }
                if !any {
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..dim {
                    if live[j] {
                        let e = (z[j] - max).exp();
                        y[base + j * inner] = e;
                        sum += e;
                    }
                }
                let inv = T::one() / sum;
                for j in 0..dim {
                    y[base + j * inner] *= inv;
                }
            }
        }
        Ok(Tensor::from_op("softmax", y, self.shape().to_vec(), vec![self.clone()], move |g, y| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let dot: T = (0..dim).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..dim {
                        let idx = base + j * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let n = self.shape().last().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Dimension { op: "layer_norm", lhs: self.shape().to_vec(), rhs: vec![0] });
        }
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::Dimension { op: "layer_norm", lhs: self.shape().to_vec(), rhs: gain.shape().to_vec() });
        }
        let rows = self.numel() / n;
        let inv_n = T::one() / T::lit(n as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        let (gw, bw) = (gain.data(), bias.data());
        for r in 0..rows {
            let row = &self.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gw[j] + bw[j];
            }
        }
        let (gt, bt) = (gain.clone(), bias.clone());
        let parents = vec![self.clone(), gain.clone(), bias.clone()];
        Ok(Tensor::from_op("layer_norm", out, self.shape().to_vec(), parents, move |g, _| {
            let gw = gt.data();
            let mut gx = vec![T::zero(); g.len()];
            let mut ggain = vec![T::zero(); n];
            let mut gbias = vec![T::zero(); n];
            for r in 0..rows {
                let gr = &g[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                let mut mean_d = T::zero();
                let mut mean_dh = T::zero();
                for j in 0..n {
                    let d = gr[j] * gw[j];
                    mean_d += d;
                    mean_dh += d * hr[j];
                    ggain[j] += gr[j] * hr[j];
                    gbias[j] += gr[j];
                }
                mean_d *= inv_n;
                mean_dh *= inv_n;
                for j in 0..n {
                    let d = gr[j] * gw[j];
                    gx[r * n + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                }
            }
            vec![Some(gx), gt.requires_grad().then_some(ggain), bt.requires_grad().then_some(gbias)]
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()))
            .collect();
        let xs = self.clone();
        Tensor::from_op("gelu", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let gx = g
                .iter()
                .zip(xs.data())
                .map(|(&g, &x)| {
                    let t = (c * (x + a * x * x * x)).tanh();
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
                    g * d
                })
                .collect();
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn softmax_symmetric_pair() {
        let y = t(&[0.0, 0.0], &[2]).softmax(0, None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        // oracle: e^0/(e^0+3) and 3/(1+3)
        let y = t(&[0.0, 3f64.ln()], &[2]).softmax(0, None).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let mask = t(&[0.0, MASKED], &[2]);
        let y = t(&[5.0, 7.0], &[2]).softmax(0, Some(&mask)).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mask = t(&[MASKED, MASKED, 0.0, 0.0], &[2, 2]);
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.softmax(1, Some(&mask)).unwrap();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!(y.data().iter().all(|v| v.is_finite()));
        y.sum().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_axis_errors() {
        assert!(t(&[1.0, 2.0], &[2]).softmax(1, None).is_err());
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = t(&[0.0, 1.0, 0.0, 1.0], &[2, 2]);
        let y = x.softmax(0, None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[1.0, 1.0, 1.0], &[3]);
        let zero = t(&[0.0, 0.0, 0.0], &[3]);
        let y = t(&[1.0, 1.0, 1.0], &[3]).layer_norm(&one, &zero, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let g2 = t(&[1.0, 1.0], &[2]);
        let y = t(&[-1.0, 1.0], &[2]).layer_norm(&g2, &t(&[0.0, 0.0], &[2]), 1e-6).unwrap();
        // direct formula: (x - 0) / sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12 && (y.data()[1] - expect).abs() < 1e-12);

        let y = t(&[0.0, 0.0], &[2]).layer_norm(&g2, &t(&[5.0, 5.0], &[2]), 1e-6).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_gain() {
        let x = t(&[1.0, 2.0], &[2]);
        assert!(x.layer_norm(&t(&[1.0], &[1]), &t(&[0.0], &[1]), 1e-6).is_err());
    }
}
