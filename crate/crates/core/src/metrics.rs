//! Image quality metrics. Computed in f64 regardless of the model scalar.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.ensure_shape(b, "psnr")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.data.len().max(1) as f64;
    Ok(psnr_from_mse(mse))
}

/// PSNR over the pixels where `region` (1×H×W) is nonzero. An empty region
/// counts as a perfect match.
pub fn psnr_masked<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, region: &[bool]) -> Result<f64> {
    a.ensure_shape(b, "psnr")?;
    let n = a.h * a.w;
    if region.len() != n {
        return Err(Error::Shape(format!("region has {} pixels, image {n}", region.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..a.c {
        for (i, _) in region.iter().enumerate().filter(|(_, &r)| r) {
            sum += (a.data[c * n + i].as_f64() - b.data[c * n + i].as_f64()).powi(2);
            count += 1;
        }
    }
    Ok(if count == 0 { PSNR_CAP_DB } else { psnr_from_mse(sum / count as f64) })
}

/// Rec.601 luma of a 3-channel image; single-channel images pass through.
pub fn luma<T: Scalar>(img: &Tensor<T>) -> Vec<f64> {
    match img.c {
        3 => {
            let n = img.h * img.w;
            (0..n)
                .map(|i| 0.299 * img.data[i].as_f64() + 0.587 * img.data[n + i].as_f64() + 0.114 * img.data[2 * n + i].as_f64())
                .collect()
        }
        _ => img.plane(0).iter().map(|v| v.as_f64()).collect(),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter, valid mode: `(h−10)×(w−10)` output.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = g.iter().enumerate().map(|(k, &gk)| gk * x[y * w + ox + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = g.iter().enumerate().map(|(k, &gk)| gk * tmp[(oy + k) * ow + ox]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(d: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let v = d[oy * ow + ox];
            for (k, &gk) in g.iter().enumerate() {
                tmp[(oy + k) * ow + ox] += gk * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for ox in 0..ow {
            let v = tmp[y * ow + ox];
            for (k, &gk) in g.iter().enumerate() {
                out[y * w + ox + k] += gk * v;
            }
        }
    }
    out
}

struct SsimMaps {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    s: Vec<f64>,
}

fn ssim_maps(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<SsimMaps> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let (mut a1, mut a2, mut b1, mut b2, mut s) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        a1[i] = 2.0 * ma * mb + C1;
        a2[i] = 2.0 * cov + C2;
        b1[i] = ma * ma + mb * mb + C1;
        b2[i] = va + vb + C2;
        s[i] = a1[i] * a2[i] / (b1[i] * b2[i]);
    }
    Ok(SsimMaps { mu_a, mu_b, a1, a2, b1, b2, s })
}

/// Mean SSIM of two single-channel planes (11×11 Gaussian, σ = 1.5, valid windows).
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let m = ssim_maps(a, b, h, w)?;
    Ok(m.s.iter().sum::<f64>() / m.s.len() as f64)
}

/// Mean SSIM over valid windows whose center lies in `region`.
pub fn ssim_plane_masked(a: &[f64], b: &[f64], h: usize, w: usize, region: &[bool]) -> Result<f64> {
    let m = ssim_maps(a, b, h, w)?;
    let (ow, half) = (w + 1 - SSIM_WINDOW, SSIM_WINDOW / 2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &v) in m.s.iter().enumerate() {
        let (y, x) = (i / ow + half, i % ow + half);
        if region[y * w + x] {
            sum += v;
            count += 1;
        }
    }
    Ok(if count == 0 { 1.0 } else { sum / count as f64 })
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_plane_grad(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
    let m = ssim_maps(a, b, h, w)?;
    let n = m.s.len() as f64;
    let g = gaussian_window();
    // dS/da_i = Σ_windows w_i·(α + β·b_i − γ·a_i)
    let mut alpha = vec![0.0; m.s.len()];
    let mut beta = vec![0.0; m.s.len()];
    let mut gamma = vec![0.0; m.s.len()];
    for i in 0..m.s.len() {
        let (s, ma, mb) = (m.s[i], m.mu_a[i], m.mu_b[i]);
        alpha[i] = s * (2.0 * mb / m.a1[i] - 2.0 * ma / m.b1[i] - 2.0 * mb / m.a2[i] + 2.0 * ma / m.b2[i]) / n;
        beta[i] = 2.0 * s / m.a2[i] / n;
        gamma[i] = 2.0 * s / m.b2[i] / n;
    }
    let fa = filter_valid_adjoint(&alpha, h, w, &g);
    let fb = filter_valid_adjoint(&beta, h, w, &g);
    let fc = filter_valid_adjoint(&gamma, h, w, &g);
    let grad = (0..h * w).map(|i| fa[i] + fb[i] * b[i] - fc[i] * a[i]).collect();
    Ok((m.s.iter().sum::<f64>() / n, grad))
}

/// SSIM on Rec.601 luma.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.ensure_shape(b, "ssim")?;
    ssim_plane(&luma(a), &luma(b), a.h, a.w)
}

pub fn ssim_masked<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, region: &[bool]) -> Result<f64> {
    a.ensure_shape(b, "ssim")?;
    ssim_plane_masked(&luma(a), &luma(b), a.h, a.w, region)
}

/// Intersection over union of the visible (≥ 0.5) regions. Two empty
/// regions score 1.
pub fn mask_iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.ensure_shape(gt, "mask_iou")?;
    let half = T::half();
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p >= half, g >= half);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_forms() {
        let z = Tensor::<f64>::zeros(3, 4, 4);
        assert_eq!(psnr(&z, &z).unwrap(), 100.0);
        assert!((psnr(&z, &Tensor::filled(3, 4, 4, 0.5)).unwrap() - 6.0206).abs() < 1e-3);
        assert!(psnr(&z, &Tensor::filled(3, 4, 4, 1.0)).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &Tensor::zeros(3, 4, 5)).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_fn(3, 16, 20, |_, _, _| rng.gen::<f64>());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::<f64>::zeros(3, 10, 20), &Tensor::zeros(3, 10, 20)).is_err());
    }

    #[test]
    fn constant_images_reduce_to_luminance_term() {
        let (x, y) = (0.2, 0.7);
        let a = Tensor::<f64>::filled(1, 12, 12, x);
        let b = Tensor::<f64>::filled(1, 12, 12, y);
        let expect = (2.0 * x * y + C1) / (x * x + y * y + C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn inverted_image_scores_low() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(3, 16, 16, |_, _, _| rng.gen::<f64>());
            let inv = a.map(|v| 1.0 - v);
            assert!(ssim(&a, &inv).unwrap() < 0.5);
        }
    }

    #[test]
    fn ssim_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (13, 14);
        let a: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let (_, g) = ssim_plane_grad(&a, &b, h, w).unwrap();
        for i in (0..h * w).step_by(7) {
            let mut p = a.clone();
            p[i] += 1e-6;
            let up = ssim_plane(&p, &b, h, w).unwrap();
            p[i] -= 2e-6;
            let dn = ssim_plane(&p, &b, h, w).unwrap();
            let num = (up - dn) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6 * (1.0 + num.abs()), "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn iou_and_masked_psnr() {
        let p = Tensor::from_vec(1, 1, 4, vec![1.0f64, 1.0, 0.0, 0.0]).unwrap();
        let g = Tensor::from_vec(1, 1, 4, vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        assert!((mask_iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let a = Tensor::from_vec(1, 1, 4, vec![0.0f64, 0.0, 0.5, 0.5]).unwrap();
        let b = Tensor::<f64>::zeros(1, 1, 4);
        assert_eq!(psnr_masked(&a, &b, &[true, true, false, false]).unwrap(), 100.0);
        assert!((psnr_masked(&a, &b, &[false, false, true, true]).unwrap() - 6.0206).abs() < 1e-3);
    }
}
