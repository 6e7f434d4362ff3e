//! Multi-scale token pyramids.
//!
//! A [`ScaleSchedule`] lists the token-grid sides of every level in ascending
//! order; the last level is the encoder's base grid. Token maps are laid out
//! channels-last as `[B, g, g, d]` and concatenated low-to-high into a single
//! `[B, total, d]` sequence.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    grids: Vec<usize>,
}

impl ScaleSchedule {
    /// Validates an ascending grid list ending at `base_grid`.
    pub fn new(base_grid: usize, grids: &[usize]) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::Schedule("empty grid list".into()));
        }
        if grids.contains(&0) {
            return Err(Error::Schedule(format!("grid sides must be positive: {grids:?}")));
        }
        if grids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule(format!("grids must be strictly ascending: {grids:?}")));
        }
        if *grids.last().unwrap() != base_grid {
            return Err(Error::Schedule(format!(
                "last grid {} does not match base grid {base_grid}",
                grids.last().unwrap()
            )));
        }
        Ok(ScaleSchedule { grids: grids.to_vec() })
    }

    /// Parses `"1,2,4,8"`.
    pub fn parse_grids(text: &str) -> Result<Vec<usize>> {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Schedule(format!("invalid grid entry {s:?} in {text:?}")))
            })
            .collect()
    }

    pub fn grids(&self) -> &[usize] {
        &self.grids
    }

    pub fn levels(&self) -> usize {
        self.grids.len()
    }

    pub fn base(&self) -> usize {
        *self.grids.last().unwrap()
    }

    /// Token count per level, `g²`.
    pub fn counts(&self) -> Vec<usize> {
        self.grids.iter().map(|g| g * g).collect()
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }

    /// Start offset of each level in the concatenated sequence.
    pub fn offsets(&self) -> Vec<usize> {
        self.counts()
            .iter()
            .scan(0, |acc, c| {
                let start = *acc;
                *acc += c;
                Some(start)
            })
            .collect()
    }

    /// Level index of a position in the concatenated sequence.
    pub fn level_of(&self, position: usize) -> usize {
        let mut end = 0;
        for (level, c) in self.counts().into_iter().enumerate() {
            end += c;
            if position < end {
                return level;
            }
        }
        panic!("position {position} beyond schedule total {}", self.total());
    }

    /// Convolutional downsampling needs power-of-two ratios to the base grid.
    pub fn check_dyadic(&self) -> Result<()> {
        let base = self.base();
        for &g in &self.grids {
            if base % g != 0 || !(base / g).is_power_of_two() {
                return Err(Error::Config(format!(
                    "grid {g} is not a power-of-two fraction of base grid {base}; \
                     use downsample=interp for non-dyadic schedules"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.grids.iter().map(|g| g.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Per-level token maps and their low-to-high concatenation.
#[derive(Debug, Clone)]
pub struct TokenPyramid<T: Real> {
    pub maps: Vec<Tensor<T>>,
    pub concatenated: Tensor<T>,
    pub schedule: ScaleSchedule,
}

impl<T: Real> TokenPyramid<T> {
    pub fn from_maps(maps: Vec<Tensor<T>>, schedule: &ScaleSchedule) -> Result<Self> {
        if maps.len() != schedule.levels() {
            return Err(Error::Shape(format!("{} maps for a {}-level schedule", maps.len(), schedule.levels())));
        }
        let mut seqs = Vec::with_capacity(maps.len());
        for (m, &g) in maps.iter().zip(schedule.grids()) {
            if m.rank() != 4 || m.shape()[1] != g || m.shape()[2] != g {
                return Err(Error::Dimension { op: "token_pyramid", lhs: m.shape().to_vec(), rhs: vec![g, g] });
            }
            let (b, d) = (m.shape()[0], m.shape()[3]);
            seqs.push(m.reshape(&[b, g * g, d])?);
        }
        let concatenated = Tensor::concat(&seqs, 1)?;
        Ok(TokenPyramid { maps, concatenated, schedule: schedule.clone() })
    }

    /// Cuts a `[B, total, d]` sequence back into `[B, g, g, d]` maps.
    pub fn split(sequence: &Tensor<T>, schedule: &ScaleSchedule) -> Result<Vec<Tensor<T>>> {
        if sequence.rank() != 3 || sequence.shape()[1] != schedule.total() {
            return Err(Error::Dimension { op: "split", lhs: sequence.shape().to_vec(), rhs: vec![schedule.total()] });
        }
        let (b, d) = (sequence.shape()[0], sequence.shape()[2]);
        schedule
            .grids()
            .iter()
            .zip(schedule.offsets())
            .map(|(&g, off)| sequence.slice(1, off, g * g)?.reshape(&[b, g, g, d]))
            .collect()
    }
}

/// Area-pools a channels-last `[B, g, g, d]` map to `[B, target, target, d]`.
pub fn pool_tokens<T: Real>(z: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    if z.rank() != 4 {
        return Err(Error::Dimension { op: "pool_tokens", lhs: z.shape().to_vec(), rhs: vec![target] });
    }
    if z.shape()[1] == target && z.shape()[2] == target {
        return Ok(z.clone());
    }
    z.permute(&[0, 3, 1, 2])?.area_pool(target, target)?.permute(&[0, 2, 3, 1])
}

fn check_base<T: Real>(z_base: &Tensor<T>, schedule: &ScaleSchedule) -> Result<()> {
    let g = schedule.base();
    if z_base.rank() != 4 || z_base.shape()[1] != g || z_base.shape()[2] != g {
        return Err(Error::Dimension { op: "downsample", lhs: z_base.shape().to_vec(), rhs: vec![g, g] });
    }
    Ok(())
}

/// Parameter-free pyramid: every level is the area-pooled base map.
pub fn downsample_interp<T: Real>(z_base: &Tensor<T>, schedule: &ScaleSchedule) -> Result<TokenPyramid<T>> {
    check_base(z_base, schedule)?;
    let maps = schedule.grids().iter().map(|&g| pool_tokens(z_base, g)).collect::<Result<Vec<_>>>()?;
    TokenPyramid::from_maps(maps, schedule)
}

/// Strides of the convolution chain reducing a grid by `ratio` (a power of
/// two): stride-2 steps when three or fewer suffice, otherwise the exponent
/// spread over three kernels with the larger strides first.
pub fn conv_strides(ratio: usize) -> Result<Vec<usize>> {
    if ratio == 0 || !ratio.is_power_of_two() {
        return Err(Error::Config(format!("downsampling ratio {ratio} is not a power of two")));
    }
    let m = ratio.trailing_zeros() as usize;
    if m <= 3 {
        return Ok(vec![2; m]);
    }
    let mut exps = vec![m / 3; 3];
    for e in exps.iter_mut().take(m % 3) {
        *e += 1;
    }
    Ok(exps.into_iter().map(|e| 1 << e).collect())
}

/// Kernel chains of the learnable downsampler, one chain per non-top level.
///
/// Each kernel is `[d, d, s, s]` and is applied with stride `s`.
#[derive(Debug, Clone)]
pub struct ConvChains<T: Real> {
    pub levels: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> ConvChains<T> {
    /// Kernel shapes for `width` channels under `schedule`.
    pub fn shapes(width: usize, schedule: &ScaleSchedule) -> Result<Vec<Vec<[usize; 4]>>> {
        schedule.check_dyadic()?;
        let base = schedule.base();
        schedule.grids()[..schedule.levels() - 1]
            .iter()
            .map(|&g| Ok(conv_strides(base / g)?.into_iter().map(|s| [width, width, s, s]).collect()))
            .collect()
    }

    /// Chains whose every kernel averages each channel over its window.
    pub fn averaging(width: usize, schedule: &ScaleSchedule) -> Result<Self> {
        let levels = Self::shapes(width, schedule)?
            .into_iter()
            .map(|chain| chain.into_iter().map(|s| averaging_kernel(s[0], s[2])).collect())
            .collect();
        Ok(ConvChains { levels })
    }
}

/// `[d, d, s, s]` kernel with `1/s²` on the channel diagonal.
pub fn averaging_kernel<T: Real>(width: usize, size: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); width * width * size * size];
    let v = T::one() / T::lit((size * size) as f64);
    for c in 0..width {
        let base = (c * width + c) * size * size;
        data[base..base + size * size].fill(v);
    }
    Tensor::new(data, &[width, width, size, size]).expect("valid kernel shape")
}

/// Learnable pyramid: level `s` is its own kernel chain applied to the base map.
pub fn downsample_conv<T: Real>(
    chains: &ConvChains<T>,
    z_base: &Tensor<T>,
    schedule: &ScaleSchedule,
) -> Result<TokenPyramid<T>> {
    schedule.check_dyadic()?;
    check_base(z_base, schedule)?;
    if chains.levels.len() != schedule.levels() - 1 {
        return Err(Error::Config(format!(
            "{} kernel chains for {} non-top levels",
            chains.levels.len(),
            schedule.levels() - 1
        )));
    }
    let channels_first = z_base.permute(&[0, 3, 1, 2])?;
    let mut maps = Vec::with_capacity(schedule.levels());
    for (chain, &g) in chains.levels.iter().zip(schedule.grids()) {
        let mut h = channels_first.clone();
        for kernel in chain {
            h = h.conv2d(kernel, kernel.shape()[3])?;
        }
        if h.shape()[2] != g {
            return Err(Error::Dimension { op: "downsample_conv", lhs: h.shape().to_vec(), rhs: vec![g, g] });
        }
        maps.push(h.permute(&[0, 2, 3, 1])?);
    }
    maps.push(z_base.clone());
    TokenPyramid::from_maps(maps, schedule)
}

/// Learnable positional encodings shared across scales.
#[derive(Debug, Clone)]
pub struct PeParams<T: Real> {
    /// `[g_top, g_top, d]`
    pub spatial: Tensor<T>,
    /// `[levels, d]`
    pub per_scale: Tensor<T>,
}

/// `PE(s) = area_pool(spatial → g_s) + per_scale[s]`, one `[g_s, g_s, d]` map per level.
pub fn positional_encoding<T: Real>(pe: &PeParams<T>, schedule: &ScaleSchedule) -> Result<Vec<Tensor<T>>> {
    let sp = pe.spatial.shape();
    let g = schedule.base();
    if sp.len() != 3 || sp[0] != g || sp[1] != g {
        return Err(Error::Dimension { op: "positional_encoding", lhs: sp.to_vec(), rhs: vec![g, g] });
    }
    let d = sp[2];
    if pe.per_scale.shape() != [schedule.levels(), d] {
        return Err(Error::Dimension {
            op: "positional_encoding",
            lhs: pe.per_scale.shape().to_vec(),
            rhs: vec![schedule.levels(), d],
        });
    }
    let batched = pe.spatial.reshape(&[1, g, g, d])?;
    schedule
        .grids()
        .iter()
        .enumerate()
        .map(|(level, &gs)| {
            let pooled = pool_tokens(&batched, gs)?.reshape(&[gs, gs, d])?;
            let scale = pe.per_scale.slice(0, level, 1)?.reshape(&[d])?;
            pooled.add(&scale)
        })
        .collect()
}

/// Ground-truth targets: level `s` is the image area-pooled to `(g_s·patch)²`.
pub fn image_pyramid<T: Real>(x: &Tensor<T>, schedule: &ScaleSchedule, patch: usize) -> Result<Vec<Tensor<T>>> {
    let side = schedule.base() * patch;
    if x.rank() != 4 || x.shape()[2] != side || x.shape()[3] != side {
        return Err(Error::Dimension { op: "image_pyramid", lhs: x.shape().to_vec(), rhs: vec![side, side] });
    }
    schedule.grids().iter().map(|&g| x.area_pool(g * patch, g * patch)).collect()
}
