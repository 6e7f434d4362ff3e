use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Fractional-overlap pooling weights: `w[o][i]` is the share of source cell
/// `i` inside output cell `o`, normalized so each row sums to one.
pub(crate) fn area_weights(input: usize, output: usize) -> Vec<f64> {
    let step = input as f64 / output as f64;
    let mut w = vec![0.0; output * input];
    for o in 0..output {
        let lo = o as f64 * step;
        let hi = (o + 1) as f64 * step;
        for i in (lo.floor() as usize)..(hi.ceil() as usize).min(input) {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            w[o * input + i] = overlap / step;
        }
    }
    w
}

impl<T: Real> Tensor<T> {
    /// Unpadded cross-correlation of `[B, C, H, W]` with `[O, C, k, k]`.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        let dim_err = || Error::Dimension { op: "conv2d", lhs: self.shape().to_vec(), rhs: kernel.shape().to_vec() };
        if self.rank() != 4 || kernel.rank() != 4 || stride == 0 {
            return Err(dim_err());
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, kc, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
        if kc != c || kh != kw || kh > h || kw > w {
            return Err(dim_err());
        }
        let k = kh;
        if (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {h}x{w} with kernel {k} is not divisible by stride {stride}"
            )));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let p = oh * ow;
        let ckk = c * k * k;

        // cols[b][p][ckk]
        let x = self.data();
        let mut cols = vec![T::zero(); b * p * ckk];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut cols[(bi * p + oy * ow + ox) * ckk..][..ckk];
                    let mut j = 0;
                    for ci in 0..c {
                        for ky in 0..k {
                            let src = ((bi * c + ci) * h + oy * stride + ky) * w + ox * stride;
                            row[j..j + k].copy_from_slice(&x[src..src + k]);
                            j += k;
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); b * o * p];
        for bi in 0..b {
            // out_b (o x p) = K (o x ckk) * cols_b^T (ckk x p)
            T::gemm(o, ckk, p, T::one(), kernel.data(), ckk, 1, &cols[bi * p * ckk..], 1, ckk, T::zero(), &mut out[bi * o * p..], p, 1);
        }
        let (xs, ks) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op("conv2d", out, vec![b, o, oh, ow], vec![self.clone(), kernel.clone()], move |g, _| {
            let gk = ks.requires_grad().then(|| {
                let mut gk = vec![T::zero(); o * ckk];
                for bi in 0..b {
                    // g_b (o x p) * cols_b (p x ckk)
                    T::gemm(o, p, ckk, T::one(), &g[bi * o * p..], p, 1, &cols[bi * p * ckk..], ckk, 1, T::one(), &mut gk, ckk, 1);
                }
                gk
            });
            let gx = xs.requires_grad().then(|| {
                let mut gcols = vec![T::zero(); p * ckk];
                let mut gx = vec![T::zero(); b * c * h * w];
                for bi in 0..b {
                    // g_b^T (p x o) * K (o x ckk)
                    T::gemm(p, o, ckk, T::one(), &g[bi * o * p..], 1, p, ks.data(), ckk, 1, T::zero(), &mut gcols, ckk, 1);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = &gcols[(oy * ow + ox) * ckk..][..ckk];
                            let mut j = 0;
                            for ci in 0..c {
                                for ky in 0..k {
                                    let dst = ((bi * c + ci) * h + oy * stride + ky) * w + ox * stride;
                                    for kx in 0..k {
                                        gx[dst + kx] += row[j + kx];
                                    }
                                    j += k;
                                }
                            }
                        }
                    }
                }
                gx
            });
            vec![gx, gk]
        }))
    }

    /// Area-weighted downsampling of `[B, C, H, W]` to `[B, C, out_h, out_w]`.
    ///
    /// Each output cell is the mean of the source region it covers; source
    /// cells straddling a boundary contribute in proportion to their overlap.
    pub fn area_pool(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::Dimension { op: "area_pool", lhs: self.shape().to_vec(), rhs: vec![out_h, out_w] });
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::Dimension { op: "area_pool", lhs: self.shape().to_vec(), rhs: vec![out_h, out_w] });
        }
        if out_h == h && out_w == w {
            return Ok(self.clone());
        }
        let wh: Vec<T> = area_weights(h, out_h).into_iter().map(T::lit).collect();
        let ww: Vec<T> = area_weights(w, out_w).into_iter().map(T::lit).collect();
        let planes = b * c;
        let mut tmp = vec![T::zero(); out_h * w];
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for pl in 0..planes {
            let src = &self.data()[pl * h * w..(pl + 1) * h * w];
            // tmp = Wh (out_h x h) * X (h x w)
            T::gemm(out_h, h, w, T::one(), &wh, h, 1, src, w, 1, T::zero(), &mut tmp, w, 1);
            // out = tmp (out_h x w) * Ww^T (w x out_w)
            T::gemm(out_h, w, out_w, T::one(), &tmp, w, 1, &ww, 1, w, T::zero(), &mut out[pl * out_h * out_w..], out_w, 1);
        }
        Ok(Tensor::from_op("area_pool", out, vec![b, c, out_h, out_w], vec![self.clone()], move |g, _| {
            let mut tmp = vec![T::zero(); h * out_w];
            let mut gx = vec![T::zero(); planes * h * w];
            for pl in 0..planes {
                let gp = &g[pl * out_h * out_w..(pl + 1) * out_h * out_w];
                // tmp = Wh^T (h x out_h) * g (out_h x out_w)
                T::gemm(h, out_h, out_w, T::one(), &wh, 1, h, gp, out_w, 1, T::zero(), &mut tmp, out_w, 1);
                // gx = tmp (h x out_w) * Ww (out_w x w)
                T::gemm(h, out_w, w, T::one(), &tmp, out_w, 1, &ww, w, 1, T::zero(), &mut gx[pl * h * w..], w, 1);
            }
            vec![Some(gx)]
        }))
    }
}
