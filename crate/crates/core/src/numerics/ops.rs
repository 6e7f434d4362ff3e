use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Sums `g` into a buffer of length `len`, wrapping indices (suffix broadcast).
fn reduce_to<T: Real>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks_exact(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
    }
    out
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    long.len() >= short.len() && long[long.len() - short.len()..] == *short
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Real> Tensor<T> {
    fn broadcast_check(&self, other: &Tensor<T>, op: &'static str) -> Result<Vec<usize>> {
        if is_suffix(self.shape(), other.shape()) {
            Ok(self.shape().to_vec())
        } else if is_suffix(other.shape(), self.shape()) {
            Ok(other.shape().to_vec())
        } else {
            Err(Error::Dimension { op, lhs: self.shape().to_vec(), rhs: other.shape().to_vec() })
        }
    }

    /// Element-wise sum; the shorter shape must be a suffix of the longer one.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.broadcast_check(other, "add")?;
        let (a, b) = (self.data(), other.data());
        let (la, lb) = (a.len(), b.len());
        let n = numel(&shape);
        let data: Vec<T> = if la == lb {
            a.iter().zip(b).map(|(x, y)| *x + *y).collect()
        } else {
            (0..n).map(|i| a[i % la] + b[i % lb]).collect()
        };
        Ok(Tensor::from_op("add", data, shape, vec![self.clone(), other.clone()], move |g, _| {
            vec![Some(reduce_to(g, la)), Some(reduce_to(g, lb))]
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.broadcast_check(other, "sub")?;
        let (a, b) = (self.data(), other.data());
        let (la, lb) = (a.len(), b.len());
        let n = numel(&shape);
        let data: Vec<T> = (0..n).map(|i| a[i % la] - b[i % lb]).collect();
        Ok(Tensor::from_op("sub", data, shape, vec![self.clone(), other.clone()], move |g, _| {
            let neg: Vec<T> = g.iter().map(|v| -*v).collect();
            vec![Some(reduce_to(g, la)), Some(reduce_to(&neg, lb))]
        }))
    }

    /// Element-wise product with suffix broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.broadcast_check(other, "mul")?;
        let (la, lb) = (self.numel(), other.numel());
        let n = numel(&shape);
        let (a, b) = (self.data(), other.data());
        let data: Vec<T> = (0..n).map(|i| a[i % la] * b[i % lb]).collect();
        let (sa, sb) = (self.clone(), other.clone());
        Ok(Tensor::from_op("mul", data, shape, vec![self.clone(), other.clone()], move |g, _| {
            let (a, b) = (sa.data(), sb.data());
            let ga: Vec<T> = g.iter().enumerate().map(|(i, v)| *v * b[i % lb]).collect();
            let gb: Vec<T> = g.iter().enumerate().map(|(i, v)| *v * a[i % la]).collect();
            vec![
                sa.requires_grad().then(|| reduce_to(&ga, la)),
                sb.requires_grad().then(|| reduce_to(&gb, lb)),
            ]
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        let data = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op("scale", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|v| *v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        let data = self.data().iter().map(|v| *v + c).collect();
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Multiplies each row (product of all but the last axis) by a constant factor.
    pub fn mul_rows(&self, factors: &[T]) -> Result<Tensor<T>> {
        let cols = *self.shape().last().unwrap_or(&1);
        if factors.len() * cols != self.numel() {
            return Err(Error::Dimension {
                op: "mul_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let f = factors.to_vec();
        let data = self
            .data()
            .chunks_exact(cols)
            .zip(&f)
            .flat_map(|(row, s)| row.iter().map(move |v| *v * *s))
            .collect();
        Ok(Tensor::from_op("mul_rows", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.chunks_exact(cols).zip(&f).flat_map(|(row, s)| row.iter().map(move |v| *v * *s)).collect())]
        }))
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op("exp", data, self.shape().to_vec(), vec![self.clone()], |g, y| {
            vec![Some(g.iter().zip(y).map(|(g, y)| *g * *y).collect())]
        })
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.abs()).collect();
        let x = self.clone();
        Tensor::from_op("abs", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let gx = g
                .iter()
                .zip(x.data())
                .map(|(g, x)| if *x > T::zero() { *g } else if *x < T::zero() { -*g } else { T::zero() })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn square(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v * *v).collect();
        let x = self.clone();
        Tensor::from_op("square", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let two = T::lit(2.0);
            vec![Some(g.iter().zip(x.data()).map(|(g, x)| two * *g * *x).collect())]
        })
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let data = self.data().iter().map(|v| v.max(lo).min(hi)).collect();
        let x = self.clone();
        Tensor::from_op("clamp", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let gx = g
                .iter()
                .zip(x.data())
                .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { T::zero() })
                .collect();
            vec![Some(gx)]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], Vec::new(), vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::lit(n as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op("mean", vec![s * inv], Vec::new(), vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// `[..., m, k] x [k, n] -> [..., m, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let err = || Error::Dimension { op: "matmul", lhs: self.shape().to_vec(), rhs: rhs.shape().to_vec() };
        if self.rank() < 1 || rhs.rank() != 2 {
            return Err(err());
        }
        let k = *self.shape().last().unwrap();
        if rhs.shape()[0] != k {
            return Err(err());
        }
        let n = rhs.shape()[1];
        let rows = self.numel() / k;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, T::one(), self.data(), k, 1, rhs.data(), n, 1, T::zero(), &mut data, n, 1);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("matmul", data, out_shape, vec![self.clone(), rhs.clone()], move |g, _| {
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::zero(); rows * k];
                // g (rows x n) * b^T (n x k)
                T::gemm(rows, n, k, T::one(), g, n, 1, b.data(), 1, n, T::zero(), &mut ga, k, 1);
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![T::zero(); k * n];
                // a^T (k x rows) * g (rows x n)
                T::gemm(k, rows, n, T::one(), a.data(), 1, k, g, n, 1, T::zero(), &mut gb, n, 1);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Batched matrix product over identical leading axes.
    ///
    /// With `trans_rhs`, `rhs` is `[..., n, k]` and is used transposed.
    pub fn bmm(&self, rhs: &Tensor<T>, trans_rhs: bool) -> Result<Tensor<T>> {
        let err = || Error::Dimension { op: "bmm", lhs: self.shape().to_vec(), rhs: rhs.shape().to_vec() };
        let (ra, rb) = (self.rank(), rhs.rank());
        if ra < 2 || ra != rb || self.shape()[..ra - 2] != rhs.shape()[..rb - 2] {
            return Err(err());
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (kb, n) = if trans_rhs {
            (rhs.shape()[rb - 1], rhs.shape()[rb - 2])
        } else {
            (rhs.shape()[rb - 2], rhs.shape()[rb - 1])
        };
        if kb != k {
            return Err(err());
        }
        let batch: usize = self.shape()[..ra - 2].iter().product();
        let mut out_shape = self.shape()[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        // strides of rhs viewed as k x n
        let (rsb, csb) = if trans_rhs { (1, k) } else { (n, 1) };
        let mut data = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let a = &self.data()[i * m * k..(i + 1) * m * k];
            let b = &rhs.data()[i * k * n..(i + 1) * k * n];
            let c = &mut data[i * m * n..(i + 1) * m * n];
            T::gemm(m, k, n, T::one(), a, k, 1, b, rsb, csb, T::zero(), c, n, 1);
        }
        let (sa, sb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("bmm", data, out_shape, vec![self.clone(), rhs.clone()], move |g, _| {
            let ga = sa.requires_grad().then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let b = &sb.data()[i * k * n..(i + 1) * k * n];
                    // g (m x n) * B^T (n x k); B^T has strides (csb, rsb)
                    T::gemm(m, n, k, T::one(), gi, n, 1, b, csb, rsb, T::zero(), &mut ga[i * m * k..(i + 1) * m * k], k, 1);
                }
                ga
            });
            let gb = sb.requires_grad().then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let a = &sa.data()[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    // dB (k x n) = A^T g, stored with the rhs layout
                    T::gemm(k, m, n, T::one(), a, 1, k, gi, n, 1, T::zero(), out, rsb, csb);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        Ok(Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Index { op: "permute", index: perm.len(), bound: rank });
        }
        let (data, shape) = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape = shape.clone();
        Ok(Tensor::from_op("permute", data, shape, vec![self.clone()], move |g, _| {
            vec![Some(permute_data(g, &out_shape, &inverse).0)]
        }))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::Index { op: "slice", index: axis, bound: self.rank() });
        }
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::Index { op: "slice", index: start + len, bound: dim });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let total = self.numel();
        Ok(Tensor::from_op("slice", data, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(Error::Dimension { op: "concat", lhs: vec![], rhs: vec![] })?;
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Index { op: "concat", index: axis, bound: rank });
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()[..axis] == first.shape()[..axis]
                && p.shape()[axis + 1..] == first.shape()[axis + 1..];
            if !ok {
                return Err(Error::Dimension { op: "concat", lhs: first.shape().to_vec(), rhs: p.shape().to_vec() });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_dim: usize = dims.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total_dim;
        let mut data = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                data.extend_from_slice(&p.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        Ok(Tensor::from_op("concat", data, shape, parts.to_vec(), move |g, _| {
            let mut grads: Vec<Vec<T>> = dims.iter().map(|d| Vec::with_capacity(outer * d * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &d) in grads.iter_mut().zip(&dims) {
                    gp.extend_from_slice(&g[off..off + d * inner]);
                    off += d * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn p(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_scalar_product() {
        let c = t(&[2.0], &[1, 1]).matmul(&t(&[3.0], &[1, 1])).unwrap();
        assert_eq!(c.data(), &[6.0]);
        assert_eq!(c.shape(), &[1, 1]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = t(&[1.0; 6], &[2, 3]).matmul(&t(&[1.0; 4], &[2, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn sum_and_its_gradient() {
        let x = p(&[1.0, 2.0, 3.0], &[3]);
        let s = x.sum();
        assert_eq!(s.item(), 6.0);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_matches_arithmetic_mean() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let oracle = x.data().iter().sum::<f64>() / 4.0;
        assert_eq!(x.mean().item(), oracle);
        assert_eq!(oracle, 2.5);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = p(&[10.0, 20.0, 30.0], &[3]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        c.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
        assert!(a.add(&t(&[1.0, 2.0], &[2])).is_err());
    }

    #[test]
    fn mul_gradients() {
        let a = p(&[1.0, 2.0], &[2]);
        let b = p(&[3.0, 5.0], &[2]);
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 5.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn permute_roundtrip_and_layout() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[i][j][k] = x[j][k][i]
        assert_eq!(y.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn slice_concat_inverse() {
        let x = t(&(0..12).map(f64::from).collect::<Vec<_>>(), &[2, 3, 2]);
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 2).unwrap();
        let back = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(x.slice(1, 2, 2).is_err());
        assert!(x.slice(3, 0, 1).is_err());
    }

    #[test]
    fn bmm_transposed_matches_manual() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[1, 2, 2]);
        let c = a.bmm(&b, true).unwrap();
        assert_eq!(c.data(), &[17.0, 23.0, 39.0, 53.0]);
        let d = a.bmm(&b, false).unwrap();
        assert_eq!(d.data(), &[19.0, 22.0, 43.0, 50.0]);
    }
}
