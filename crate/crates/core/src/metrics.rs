//! Image-quality metrics: PSNR, windowed SSIM and a Laplacian-pyramid
//! perceptual proxy. Images are row-major `res × res × channels` in `[0, 1]`.

use crate::error::{Error, Result};
use crate::kernels;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Band-pass levels of the perceptual pyramid; the low-pass residual is added on top.
pub const PYRAMID_LEVELS: usize = 3;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("image sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

fn grayscale(x: &[f64], channels: usize) -> Vec<f64> {
    x.chunks(channels).map(|p| p.iter().sum::<f64>() / channels as f64).collect()
}

/// SSIM of one window given its pixel pairs.
pub fn ssim_window(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

/// Mean SSIM over 8×8 windows at stride 4 on the channel-mean grayscale image.
pub fn ssim(a: &[f64], b: &[f64], res: usize, channels: usize) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != res * res * channels {
        return Err(Error::Shape(format!("image has {} values, expected {res}²·{channels}", a.len())));
    }
    if res < SSIM_WINDOW {
        return Err(Error::Shape(format!("image side {res} smaller than the {SSIM_WINDOW}-pixel window")));
    }
    let (ga, gb) = (grayscale(a, channels), grayscale(b, channels));
    let mut total = 0.0;
    let mut count = 0;
    let mut wa = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut wb = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in (0..=res - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x in (0..=res - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            wa.clear();
            wb.clear();
            for dy in 0..SSIM_WINDOW {
                let row = (y + dy) * res + x;
                wa.extend_from_slice(&ga[row..row + SSIM_WINDOW]);
                wb.extend_from_slice(&gb[row..row + SSIM_WINDOW]);
            }
            total += ssim_window(&wa, &wb);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Band-pass levels followed by the low-pass residual.
pub fn laplacian_pyramid(x: &[f64], res: usize, channels: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(PYRAMID_LEVELS + 1);
    let mut cur = x.to_vec();
    let mut r = res;
    for _ in 0..PYRAMID_LEVELS {
        let low = kernels::pool2(&cur, r, r, channels);
        let up = kernels::upsample2(&low, r / 2, r / 2, channels);
        out.push(cur.iter().zip(&up).map(|(a, b)| a - b).collect());
        cur = low;
        r /= 2;
    }
    out.push(cur);
    out
}

pub fn check_pyramid_size(res: usize) -> Result<()> {
    if !res.is_multiple_of(1 << PYRAMID_LEVELS) || res == 0 {
        return Err(Error::Shape(format!("perceptual proxy needs a side divisible by {}", 1 << PYRAMID_LEVELS)));
    }
    Ok(())
}

/// Sum over pyramid levels of the mean absolute difference.
pub fn perceptual_distance(a: &[f64], b: &[f64], res: usize, channels: usize) -> Result<f64> {
    same_len(a, b)?;
    check_pyramid_size(res)?;
    let (pa, pb) = (laplacian_pyramid(a, res, channels), laplacian_pyramid(b, res, channels));
    Ok(pa
        .iter()
        .zip(&pb)
        .map(|(la, lb)| la.iter().zip(lb).map(|(x, y)| (x - y).abs()).sum::<f64>() / la.len() as f64)
        .sum())
}

/// Normals as colours, `(n + 1) / 2`, white where `mask` is 0.
pub fn encode_normals(normal: &[f64], mask: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(normal.len());
    for (n, &m) in normal.chunks(3).zip(mask) {
        if m > 0.5 {
            out.extend(n.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)));
        } else {
            out.extend_from_slice(&[1.0; 3]);
        }
    }
    out
}

pub fn decode_normals(rgb: &[f64]) -> Vec<f64> {
    rgb.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// PSNR, SSIM and perceptual distance of one image pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Triple {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl Triple {
    pub fn measure(a: &[f64], b: &[f64], res: usize) -> Result<Self> {
        Ok(Self { psnr: psnr(a, b)?, ssim: ssim(a, b, res, 3)?, perceptual: perceptual_distance(a, b, res, 3)? })
    }

    pub fn mean(items: &[Triple]) -> Triple {
        let n = items.len().max(1) as f64;
        Triple {
            psnr: items.iter().map(|t| t.psnr).sum::<f64>() / n,
            ssim: items.iter().map(|t| t.ssim).sum::<f64>() / n,
            perceptual: items.iter().map(|t| t.perceptual).sum::<f64>() / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;
    use rand::Rng;

    fn random_image(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| r.gen::<f64>()).collect()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_image(0, 16 * 16 * 3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b: Vec<f64> = a.iter().map(|v| v * 0.8 + 0.1).collect();
        let c: Vec<f64> = b.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &a[1..]).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random_image(1, 32 * 32 * 3);
        assert_eq!(ssim(&a, &a, 32, 3).unwrap(), 1.0);
        let bin: Vec<f64> = (0..16 * 16).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
        let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&bin, &inv, 16, 1).unwrap() < 0.0);
        assert!(ssim(&a[..4 * 4 * 3], &a[..4 * 4 * 3], 4, 3).is_err());
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let a = random_image(2, 16 * 16 * 3);
        let b = random_image(3, 16 * 16 * 3);
        assert_eq!(perceptual_distance(&a, &a, 16, 3).unwrap(), 0.0);
        assert_eq!(perceptual_distance(&a, &b, 16, 3).unwrap(), perceptual_distance(&b, &a, 16, 3).unwrap());
    }

    #[test]
    fn pyramid_reconstructs_image() {
        let a = random_image(4, 16 * 16 * 3);
        let p = laplacian_pyramid(&a, 16, 3);
        let mut cur = p[PYRAMID_LEVELS].clone();
        let mut r = 16 >> PYRAMID_LEVELS;
        for band in p[..PYRAMID_LEVELS].iter().rev() {
            let up = kernels::upsample2(&cur, r, r, 3);
            cur = up.iter().zip(band).map(|(u, b)| u + b).collect();
            r *= 2;
        }
        for (x, y) in cur.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
