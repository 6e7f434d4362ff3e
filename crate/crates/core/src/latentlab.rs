//! Latent-space geometry: deterministic 2D projection, Gaussian KDE on a grid,
//! uniformity statistics, the decode/downsample commutation residual and the
//! latent dump format.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::{no_grad, Real, Tensor};
use crate::tokenizer::{Mode, TokenizerModel};

/// Points on the two leading principal axes.
#[derive(Debug, Clone)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each returned axis.
    pub variances: [f64; 2],
    /// Number of returned axes that carried no variance and were zero-filled.
    pub degenerate_axes: usize,
}

/// Centers the points and projects them on the top two eigenvectors of their
/// covariance. Each axis is oriented so that its largest-magnitude
/// coordinate is positive.
pub fn project2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Shape(format!("projection needs at least 3 points, got {n}")));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points must share one nonzero dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("projection input contains non-finite values".into()));
    }
    let mut x = DMatrix::from_fn(n, dim, |i, j| points[i][j]);
    let mean: Vec<f64> = (0..dim).map(|j| x.column(j).sum() / n as f64).collect();
    for j in 0..dim {
        x.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let denom = (n - 1) as f64;
    // eigenpairs (variance, unit axis in feature space), largest first
    let mut axes: Vec<(f64, DVector<f64>)> = if dim <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x / denom);
        (0..dim).map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned())).collect()
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose() / denom);
        (0..n)
            .map(|k| {
                let v = x.transpose() * eig.eigenvectors.column(k);
                let norm = v.norm();
                (eig.eigenvalues[k], if norm > 0.0 { v / norm } else { v })
            })
            .collect()
    };
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let scale = axes.first().map_or(0.0, |a| a.0.abs()).max(f64::MIN_POSITIVE);
    let mut out = vec![[0.0; 2]; n];
    let mut variances = [0.0; 2];
    let mut degenerate_axes = 0;
    for (k, (lambda, axis)) in axes.into_iter().take(2).enumerate() {
        if lambda <= 1e-12 * scale || lambda <= 1e-300 {
            degenerate_axes += 1;
            continue;
        }
        let pivot = axis.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let axis = if pivot < 0.0 { -axis } else { axis };
        let coords = &x * axis;
        for (i, c) in coords.iter().enumerate() {
            out[i][k] = *c;
        }
        variances[k] = lambda;
    }
    degenerate_axes += 2usize.saturating_sub(dim.min(n));
    if degenerate_axes > 0 {
        log::warn!("projection: {degenerate_axes} of 2 axes carry no variance and were zero-filled");
    }
    Ok(Projection { points: out, variances, degenerate_axes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeOptions {
    /// Cells per side.
    pub grid: usize,
    /// Kernel width; Scott's rule when `None`.
    pub bandwidth: Option<f64>,
    /// Bounding-box padding in bandwidths.
    pub padding: f64,
}

impl Default for KdeOptions {
    fn default() -> Self {
        KdeOptions { grid: 64, bandwidth: None, padding: 3.0 }
    }
}

/// Normalized densities on a `grid × grid` lattice, row-major with `y` as the row.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub densities: Vec<f64>,
    pub grid: usize,
    pub bandwidth: f64,
    /// `[x_min, x_max, y_min, y_max]` of the padded box.
    pub bounds: [f64; 4],
}

/// `n^(-1/6)` times the root-mean-square of the per-axis standard deviations.
pub fn scott_bandwidth(points: &[[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    let var = |k: usize| {
        let m = points.iter().map(|p| p[k]).sum::<f64>() / n;
        points.iter().map(|p| (p[k] - m).powi(2)).sum::<f64>() / n
    };
    ((var(0) + var(1)) / 2.0).sqrt() * n.powf(-1.0 / 6.0)
}

/// Isotropic Gaussian KDE evaluated at cell centers and normalized to sum to 1.
pub fn kde_density(points: &[[f64; 2]], opts: &KdeOptions) -> Result<DensityGrid> {
    if points.is_empty() || opts.grid == 0 {
        return Err(Error::Shape("density estimation needs points and a nonempty grid".into()));
    }
    let bandwidth = match opts.bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Config(format!("bandwidth {h} must be positive"))),
        None => {
            let h = scott_bandwidth(points);
            if h > 0.0 {
                h
            } else {
                log::warn!("kde: points have no spread, falling back to unit bandwidth");
                1.0
            }
        }
    };
    let pad = opts.padding * bandwidth;
    let span = |k: usize| {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min) - pad;
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max) + pad;
        (lo, hi)
    };
    let ((x0, x1), (y0, y1)) = (span(0), span(1));
    let g = opts.grid;
    let centers = |lo: f64, hi: f64| -> Vec<f64> { (0..g).map(|i| lo + (i as f64 + 0.5) * (hi - lo) / g as f64).collect() };
    let (cx, cy) = (centers(x0, x1), centers(y0, y1));
    let inv = -0.5 / (bandwidth * bandwidth);
    let mut dens = vec![0.0; g * g];
    let (mut kx, mut ky) = (vec![0.0; g], vec![0.0; g]);
    for p in points {
        for i in 0..g {
            kx[i] = ((cx[i] - p[0]).powi(2) * inv).exp();
            ky[i] = ((cy[i] - p[1]).powi(2) * inv).exp();
        }
        for (row, &wy) in dens.chunks_mut(g).zip(&ky) {
            for (d, &wx) in row.iter_mut().zip(&kx) {
                *d += wy * wx;
            }
        }
    }
    let total: f64 = dens.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetrics("kernel density underflowed to zero everywhere".into()));
    }
    dens.iter_mut().for_each(|d| *d /= total);
    Ok(DensityGrid { densities: dens, grid: g, bandwidth, bounds: [x0, x1, y0, y1] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniformity {
    /// Population standard deviation over mean.
    pub density_cv: f64,
    pub gini: f64,
    /// Shannon entropy divided by `ln(cells)`.
    pub norm_entropy: f64,
}

pub fn uniformity_metrics(densities: &[f64]) -> Result<Uniformity> {
    let n = densities.len();
    if n < 2 {
        return Err(Error::UndefinedMetrics(format!("uniformity needs at least 2 cells, got {n}")));
    }
    if let Some(v) = densities.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::UndefinedMetrics(format!("density {v} is negative or non-finite")));
    }
    let total: f64 = densities.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedMetrics("all densities are zero".into()));
    }
    let nf = n as f64;
    let mean = total / nf;
    let var = densities.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / nf;
    let mut sorted = densities.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weighted: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * (i + 1) as f64 - nf - 1.0) * x).sum();
    let entropy: f64 = densities
        .iter()
        .map(|d| d / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(Uniformity {
        density_cv: var.sqrt() / mean,
        gini: (weighted / (nf * total)).max(0.0),
        norm_entropy: (entropy / nf.ln()).min(1.0),
    })
}

/// Uniformity of a latent population together with how it was measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentStats {
    pub density_cv: f64,
    pub gini: f64,
    pub norm_entropy: f64,
    pub n_points: usize,
    pub grid_size: usize,
    pub bandwidth: f64,
}

/// Projection, density estimation and uniformity statistics in one pass.
pub fn analyze(vectors: &[Vec<f64>], opts: &KdeOptions) -> Result<LatentStats> {
    let proj = project2d(vectors)?;
    let grid = kde_density(&proj.points, opts)?;
    let u = uniformity_metrics(&grid.densities)?;
    Ok(LatentStats {
        density_cv: u.density_cv,
        gini: u.gini,
        norm_entropy: u.norm_entropy,
        n_points: vectors.len(),
        grid_size: grid.grid,
        bandwidth: grid.bandwidth,
    })
}

/// Splits a `[B, g, g, d]` latent into one `d`-vector per token.
pub fn token_vectors<T: Real>(latent: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = *latent.shape().last().expect("nonscalar latent");
    latent.data().chunks(d).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Relative L2 gap between each level's decoded image and the area-pooled
/// top-level image, in eval mode. The top level is 0 by construction.
pub fn commutation_residuals<T: Real>(model: &TokenizerModel<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    no_grad(|| {
        let rec = model.reconstruct(x, Mode::Eval)?;
        let top = rec.outputs.last().expect("at least one level");
        rec.outputs
            .iter()
            .map(|out| {
                let side = out.shape()[3];
                let pooled = top.area_pool(side, side)?;
                let diff: f64 = out.data().iter().zip(pooled.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                let norm: f64 = pooled.data().iter().map(|v| v.as_f64().powi(2)).sum();
                Ok(diff.sqrt() / (norm.sqrt() + 1e-12))
            })
            .collect()
    })
}

pub fn commutation_residual<T: Real>(model: &TokenizerModel<T>, x: &Tensor<T>, level: usize) -> Result<f64> {
    let levels = model.schedule().levels();
    if level >= levels {
        return Err(Error::Index { op: "commutation_residual", index: level, bound: levels });
    }
    Ok(commutation_residuals(model, x)?[level])
}

pub const LATENT_MAGIC: &[u8; 4] = b"HLAT";

/// Serializes equal-length vectors as `HLAT | count u32 | dim u32 | f32 LE values`.
pub fn write_latents(vectors: &[Vec<f64>]) -> Result<Vec<u8>> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("latent vectors differ in length".into()));
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Shape(format!("{v} exceeds u32")));
    let mut out = Vec::with_capacity(12 + 4 * dim * vectors.len());
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&to_u32(vectors.len())?.to_le_bytes());
    out.extend_from_slice(&to_u32(dim)?.to_le_bytes());
    for v in vectors.iter().flatten() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_latents(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let fail = |offset: usize, message: String| Err(Error::Format { offset, message });
    if bytes.len() < 12 {
        return fail(bytes.len(), "truncated latent header".into());
    }
    if &bytes[..4] != LATENT_MAGIC {
        return fail(0, "bad magic, expected HLAT".into());
    }
    let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let (count, dim) = (word(4), word(8));
    let expected = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(12));
    match expected {
        Some(len) if len == bytes.len() => {}
        Some(len) if len > bytes.len() => return fail(bytes.len(), format!("truncated: {count}×{dim} values need {len} bytes")),
        Some(len) => return fail(len, "trailing bytes after last vector".into()),
        None => return fail(4, format!("implausible size {count}×{dim}")),
    }
    if dim == 0 && count > 0 {
        return fail(8, "zero dimension".into());
    }
    Ok(bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect::<Vec<_>>()
        .chunks(dim.max(1))
        .map(<[f64]>::to_vec)
        .collect())
}

pub fn save_latents(vectors: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, write_latents(vectors)?)?)
}

pub fn load_latents(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    read_latents(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn centered_2d_points_keep_distances() {
        let pts = vec![vec![2.0, 0.5], vec![-1.0, 1.0], vec![-1.5, -2.0], vec![0.5, 0.5]];
        let p = project2d(&pts).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = dist([pts[i][0], pts[i][1]], [pts[j][0], pts[j][1]]);
                assert!((d0 - dist(p.points[i], p.points[j])).abs() < 1e-10);
            }
        }
        assert_eq!(p.degenerate_axes, 0);
    }

    #[test]
    fn identical_points_project_to_origin() {
        let p = project2d(&vec![vec![1.0, 2.0, 3.0]; 5]).unwrap();
        assert!(p.points.iter().all(|q| *q == [0.0, 0.0]));
        assert_eq!(p.degenerate_axes, 2);
        assert!(project2d(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn planar_3d_points_lose_nothing() {
        // plane spanned by (1,1,0)/√2 and (0,0,1)
        let coeffs = [(1.0, 0.0), (-2.0, 1.0), (0.5, -1.5), (3.0, 2.0), (-1.0, -0.5)];
        let pts: Vec<Vec<f64>> = coeffs.iter().map(|&(a, b)| vec![a, a, b]).collect();
        let p = project2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d3: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum::<f64>().sqrt();
                assert!((d3 - dist(p.points[i], p.points[j])).abs() < 1e-9);
            }
        }
        // residual variance equals total variance minus the two kept axes
        let n = pts.len() as f64;
        let total: f64 = (0..3)
            .map(|k| {
                let m = pts.iter().map(|q| q[k]).sum::<f64>() / n;
                pts.iter().map(|q| (q[k] - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum();
        assert!((total - p.variances[0] - p.variances[1]).abs() < 1e-9);
    }

    #[test]
    fn wide_inputs_use_gram_route() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| (0..10).map(|j| ((i * 7 + j * 3) % 5) as f64).collect()).collect();
        let p = project2d(&pts).unwrap();
        // covariance eigenvalues computed directly
        let cov = {
            let n = pts.len();
            let mut x = DMatrix::from_fn(n, 10, |i, j| pts[i][j]);
            for j in 0..10 {
                let m = x.column(j).sum() / n as f64;
                x.column_mut(j).add_scalar_mut(-m);
            }
            let mut ev: Vec<f64> = SymmetricEigen::new(x.transpose() * &x / (n as f64 - 1.0)).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            ev
        };
        assert!((p.variances[0] - cov[0]).abs() < 1e-9);
        assert!((p.variances[1] - cov[1]).abs() < 1e-9);
    }

    #[test]
    fn projection_is_deterministic() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.01]).collect();
        let a = analyze(&pts, &KdeOptions { grid: 16, ..Default::default() }).unwrap();
        let b = analyze(&pts, &KdeOptions { grid: 16, ..Default::default() }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_point_kde_is_symmetric() {
        let g = kde_density(&[[0.0, 0.0]], &KdeOptions { grid: 5, bandwidth: Some(1.0), padding: 3.0 }).unwrap();
        let d = &g.densities;
        let center = d[12];
        assert!(d.iter().all(|&v| v <= center));
        assert!((d[11] - d[13]).abs() < 1e-15 && (d[7] - d[17]).abs() < 1e-15 && (d[11] - d[7]).abs() < 1e-15);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d[11] > d[10]);
    }

    #[test]
    fn two_separated_points_give_equal_modes() {
        let g = kde_density(&[[-10.0, 0.0], [10.0, 0.0]], &KdeOptions { grid: 7, bandwidth: Some(1.0), padding: 3.0 }).unwrap();
        // box is [-13, 13] × [-3, 3]; cells 0 and 6 of row 3 hold the modes
        let row = &g.densities[21..28];
        let oracle = |cx: f64| [(-10.0f64), 10.0].iter().map(|p| (-(cx - p).powi(2) / 2.0).exp()).sum::<f64>();
        let step = 26.0 / 7.0;
        let centers: Vec<f64> = (0..7).map(|i| -13.0 + (i as f64 + 0.5) * step).collect();
        assert!((row[0] - row[6]).abs() < 1e-15);
        assert!((row[0] / row[3] - oracle(centers[0]) / oracle(centers[3])).abs() < 1e-9);
        assert!(row[0] > row[1] && row[1] > row[2] && row[2] > row[3]);
    }

    #[test]
    fn kde_rejects_bad_bandwidth() {
        assert!(kde_density(&[[0.0, 0.0]], &KdeOptions { bandwidth: Some(0.0), ..Default::default() }).is_err());
    }

    #[test]
    fn metric_identities() {
        let u = uniformity_metrics(&[0.25; 4]).unwrap();
        assert!(u.density_cv.abs() < 1e-12 && u.gini.abs() < 1e-12 && (u.norm_entropy - 1.0).abs() < 1e-12);
        let mut mass = vec![0.0; 10];
        mass[3] = 2.0;
        let u = uniformity_metrics(&mass).unwrap();
        assert!((u.gini - 0.9).abs() < 1e-12 && u.norm_entropy.abs() < 1e-12);
        let u = uniformity_metrics(&[1.0, 3.0]).unwrap();
        assert!((u.density_cv - 0.5).abs() < 1e-12);
        assert!((u.gini - 0.25).abs() < 1e-12);
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln()) / 2f64.ln();
        assert!((u.norm_entropy - h).abs() < 1e-12);
        assert!((u.norm_entropy - 0.811).abs() < 1e-3);
        assert!(matches!(uniformity_metrics(&[0.0, 0.0]), Err(Error::UndefinedMetrics(_))));
        assert!(uniformity_metrics(&[1.0, -1.0]).is_err());
    }

    fn gini_pairwise(d: &[f64]) -> f64 {
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let mut s = 0.0;
        for a in d {
            for b in d {
                s += (a - b).abs();
            }
        }
        s / (n * n) / (2.0 * mean)
    }

    proptest! {
        #[test]
        fn gini_matches_pairwise_and_is_scale_free(d in prop::collection::vec(0.0f64..10.0, 2..40), c in 0.01f64..100.0) {
            prop_assume!(d.iter().sum::<f64>() > 1e-6);
            let g = uniformity_metrics(&d).unwrap().gini;
            prop_assert!((g - gini_pairwise(&d)).abs() < 1e-9);
            let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
            prop_assert!((uniformity_metrics(&scaled).unwrap().gini - g).abs() < 1e-9);
            prop_assert!((0.0..1.0).contains(&g));
        }

        #[test]
        fn entropy_peaks_at_uniform(n in 2usize..50, i in 0usize..50, eps in 1e-4f64..0.5) {
            let mut d = vec![1.0; n];
            d[i % n] += eps;
            let u = uniformity_metrics(&d).unwrap();
            prop_assert!(u.norm_entropy < 1.0);
            prop_assert!(u.density_cv >= 0.0 && u.gini >= 0.0);
        }
    }

    #[test]
    fn latent_dump_round_trip() {
        let v = vec![vec![0.5, -1.25, 3.0], vec![0.0, 2.0, -0.125]];
        let bytes = write_latents(&v).unwrap();
        assert_eq!(&bytes[..4], b"HLAT");
        assert_eq!(read_latents(&bytes).unwrap(), v);
        assert!(matches!(read_latents(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(read_latents(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
