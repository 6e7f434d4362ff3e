//! Reconstruction quality on images stored in `[-1, 1]`, measured after
//! mapping to `[0, 1]`.

use mstok_core::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

/// `10·log10(1 / MSE)` on `[0, 1]` values, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension { op: "psnr", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let mse = a.iter().zip(b).map(|(x, y)| (unit(*x) - unit(*y)).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 8, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

/// Summed-area table with a zero border row and column.
fn integral(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean SSIM over every `window × window` position and every channel of
/// `channels × height × width` images, with population window statistics.
pub fn ssim(a: &[f32], b: &[f32], channels: usize, height: usize, width: usize, p: &SsimParams) -> Result<f64> {
    let plane = height * width;
    if a.len() != channels * plane || b.len() != a.len() || channels == 0 {
        return Err(Error::Dimension { op: "ssim", lhs: vec![a.len()], rhs: vec![channels, height, width] });
    }
    let k = p.window;
    if k == 0 || k > height || k > width {
        return Err(Error::Config(format!("ssim window {k} does not fit a {height}x{width} image")));
    }
    let n = (k * k) as f64;
    let (oh, ow) = (height - k + 1, width - k + 1);
    let mut total = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = a[c * plane..(c + 1) * plane].iter().map(|&v| unit(v)).collect();
        let y: Vec<f64> = b[c * plane..(c + 1) * plane].iter().map(|&v| unit(v)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let tables = [&x, &y, &xx, &yy, &xy].map(|v| integral(v, height, width));
        let w1 = width + 1;
        for r in 0..oh {
            for q in 0..ow {
                let sum = |t: &Vec<f64>| t[(r + k) * w1 + q + k] - t[r * w1 + q + k] - t[(r + k) * w1 + q] + t[r * w1 + q];
                let (mx, my) = (sum(&tables[0]) / n, sum(&tables[1]) / n);
                let vx = (sum(&tables[2]) / n - mx * mx).max(0.0);
                let vy = (sum(&tables[3]) / n - my * my).max(0.0);
                let cov = sum(&tables[4]) / n - mx * my;
                total += ((2.0 * mx * my + p.c1) * (2.0 * cov + p.c2)) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
            }
        }
    }
    Ok(total / (channels * oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct per-window evaluation without summed-area tables.
    fn ssim_direct(a: &[f32], b: &[f32], c: usize, h: usize, w: usize, p: &SsimParams) -> f64 {
        let k = p.window;
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for r in 0..=h - k {
                for q in 0..=w - k {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = ch * h * w + (r + dy) * w + q + dx;
                            xs.push(unit(a[i]));
                            ys.push(unit(b[i]));
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                    let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                    let cov = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / n;
                    total += ((2.0 * mx * my + p.c1) * (2.0 * cov + p.c2)) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn checkerboard(side: usize) -> Vec<f32> {
        (0..3 * side * side).map(|i| if ((i % side) + (i / side) % side) % 2 == 0 { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn psnr_cases() {
        let a = vec![0.0f32; 12];
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        // 0.1 in [0, 1] is 0.2 in [-1, 1]
        let b: Vec<f32> = a.iter().map(|v| v + 0.2).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c: Vec<f32> = a.iter().map(|v| v + 1.0).collect();
        assert!((psnr(&a, &c).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &a[..3]).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let p = SsimParams::default();
        let img: Vec<f32> = (0..3 * 256).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        assert!((ssim(&img, &img, 3, 16, 16, &p).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f32> = img.iter().map(|v| -v).collect();
        assert!(ssim(&img, &inv, 3, 16, 16, &p).unwrap() < 1.0);
    }

    #[test]
    fn checkerboard_matches_direct_formula() {
        let p = SsimParams::default();
        let a = checkerboard(12);
        let b: Vec<f32> = a.iter().map(|v| -v).collect();
        let fast = ssim(&a, &b, 3, 12, 12, &p).unwrap();
        let slow = ssim_direct(&a, &b, 3, 12, 12, &p);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        assert!(fast < 0.0);
        let noisy: Vec<f32> = a.iter().enumerate().map(|(i, v)| v * 0.8 + ((i * 13 % 7) as f32 - 3.0) * 0.05).collect();
        let fast = ssim(&a, &noisy, 3, 12, 12, &p).unwrap();
        assert!((fast - ssim_direct(&a, &noisy, 3, 12, 12, &p)).abs() < 1e-10);
    }

    #[test]
    fn oversized_window_is_config_error() {
        let a = vec![0.0f32; 3 * 16];
        assert!(matches!(ssim(&a, &a, 3, 4, 4, &SsimParams::default()), Err(Error::Config(_))));
    }
}
