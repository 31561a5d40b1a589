//! Image-quality metrics on `[0, 1]` images.

use crate::error::{invalid, shape_err, Error, Result};
use crate::illumination::SkyMask;
use crate::imaging::Image;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("images {:?} and {:?} differ in shape", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels for unit peak; `f64::INFINITY`
/// for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Err(invalid("empty image"));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows of the channel-mean grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(invalid(format!("image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.height, a.width)));
    }
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let (h, w) = (a.height, a.width);
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(&ga.data, h, w, &k);
    let mu_b = filter_valid(&gb.data, h, w, &k);
    let aa = filter_valid(&prod(&ga.data, &ga.data), h, w, &k);
    let bb = filter_valid(&prod(&gb.data, &gb.data), h, w, &k);
    let ab = filter_valid(&prod(&ga.data, &gb.data), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean cosine similarity between aligned rows of two `[N, D]` token sets.
pub fn dino_similarity(tokens_a: &Tensor, tokens_b: &Tensor) -> Result<f64> {
    if tokens_a.rank() != 2 || tokens_a.shape() != tokens_b.shape() || tokens_a.dim(0) == 0 {
        return Err(shape_err(format!("token sets {:?} and {:?} must both be [N, D]", tokens_a.shape(), tokens_b.shape())));
    }
    let d = tokens_a.dim(1);
    let mut total = 0.0;
    for (ra, rb) in tokens_a.data().chunks_exact(d).zip(tokens_b.data().chunks_exact(d)) {
        let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(invalid("zero-norm token"));
        }
        total += ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    }
    Ok(total / tokens_a.dim(0) as f64)
}

/// Mean absolute difference.
pub fn mean_abs_error(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Err(invalid("empty image"));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

/// Fraction of pixels where thresholding the opacity at `threshold`
/// reproduces the non-sky label.
pub fn opacity_accuracy(opacity: &[f64], mask: &SkyMask, threshold: f64) -> Result<f64> {
    if opacity.len() != mask.height * mask.width || opacity.is_empty() {
        return Err(shape_err(format!("{} opacities for a {}x{} mask", opacity.len(), mask.height, mask.width)));
    }
    let hits = opacity.iter().zip(mask.values()).filter(|(o, &m)| (**o >= threshold) == (m == 0)).count();
    Ok(hits as f64 / opacity.len() as f64)
}

/// Median absolute depth error over pixels with a finite reference depth.
pub fn median_depth_error(depth: &[f64], reference: &[f64]) -> Result<f64> {
    if depth.len() != reference.len() {
        return Err(shape_err(format!("{} depths against {} references", depth.len(), reference.len())));
    }
    let mut errs: Vec<f64> =
        depth.iter().zip(reference).filter(|(_, r)| r.is_finite()).map(|(d, r)| (d - r).abs()).collect();
    if errs.is_empty() {
        return Err(Error::Empty("ground pixels"));
    }
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    Ok(if n % 2 == 1 { errs[n / 2] } else { 0.5 * (errs[n / 2 - 1] + errs[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pattern(h: usize, w: usize, seed: usize) -> Image {
        let data = (0..3 * h * w).map(|i| (((i * 7919 + seed * 104729) % 1000) as f64) / 999.0).collect();
        Image::new(3, h, w, data).unwrap()
    }

    /// Direct per-window evaluation with 2D weights.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let (ga, gb) = (a.grayscale(), b.grayscale());
        let k = gaussian_window();
        let (h, w) = (a.height, a.width);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = k[i] * k[j];
                        let (p, q) = (ga.at(0, y0 + i, x0 + j), gb.at(0, y0 + i, x0 + j));
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(3, 4, 4, 0.3);
        let b = Image::filled(3, 4, 4, 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(3, 4, 5, 0.0)).is_err());
    }

    #[test]
    fn ssim_matches_loop_reference() {
        let a = pattern(16, 16, 1);
        let b = pattern(16, 16, 2);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim_reference(&a, &b), epsilon = 1e-6);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let inv = Image::new(3, 16, 16, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&Image::filled(3, 10, 40, 0.0), &Image::filled(3, 10, 40, 0.0)).is_err());
    }

    #[test]
    fn dino_cosine_cases() {
        let a = Tensor::from_vec(vec![1.0, 0.0, 0.0, 2.0], &[2, 2]);
        let b = Tensor::from_vec(vec![0.0, 3.0, -1.0, 0.0], &[2, 2]);
        assert_abs_diff_eq!(dino_similarity(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(dino_similarity(&a, &b).unwrap(), 0.0);
        assert_abs_diff_eq!(dino_similarity(&a, &a.neg()).unwrap(), -1.0, epsilon = 1e-15);
        assert!(dino_similarity(&a, &Tensor::zeros(&[2, 2])).is_err());
        assert!(dino_similarity(&a, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn evaluation_helpers() {
        let a = Image::filled(3, 2, 2, 0.5);
        assert_abs_diff_eq!(mean_abs_error(&a, &Image::filled(3, 2, 2, 0.2)).unwrap(), 0.3, epsilon = 1e-12);
        let mask = SkyMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(opacity_accuracy(&[0.1, 0.9, 0.7, 0.5], &mask, 0.5).unwrap(), 0.75);
        assert!(opacity_accuracy(&[0.0], &mask, 0.5).is_err());
        let inf = f64::INFINITY;
        assert_eq!(median_depth_error(&[1.0, 5.0, 2.0, 9.0], &[inf, 4.0, 4.0, 4.0]).unwrap(), 2.0);
        assert_eq!(median_depth_error(&[1.0, 5.0], &[2.0, 2.0]).unwrap(), 2.0);
        assert!(median_depth_error(&[1.0], &[inf]).is_err());
    }
}
