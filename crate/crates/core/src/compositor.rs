//! Blending of the three decoder outputs into the target view:
//! `target = gs(source, shift) · mask + inpaint · (1 − mask)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::{grid_sample, grid_sample_backward, Border, OcclusionMask, ShiftMap};

fn check<T: Scalar>(source: &Tensor<T>, shift: &ShiftMap<T>, mask: &OcclusionMask<T>, inpaint: &Tensor<T>) -> Result<()> {
    source.ensure_shape(inpaint, "source vs inpaint")?;
    if shift.0.c != 2 || !shift.0.same_spatial(source) {
        return Err(Error::Shape(format!("shift {:?} vs source {:?}", shift.0.shape(), source.shape())));
    }
    if mask.0.c != 1 || !mask.0.same_spatial(source) {
        return Err(Error::Shape(format!("mask {:?} vs source {:?}", mask.0.shape(), source.shape())));
    }
    Ok(())
}

/// Soft blend of the warped source and the inpainting, clamped to `[0,1]`.
pub fn synthesize<T: Scalar>(
    source: &Tensor<T>,
    shift: &ShiftMap<T>,
    mask: &OcclusionMask<T>,
    inpaint: &Tensor<T>,
    border: Border,
) -> Result<Tensor<T>> {
    check(source, shift, mask, inpaint)?;
    let warped = grid_sample(source, shift, border)?;
    Ok(blend(&warped, mask, inpaint))
}

/// `warped · mask + inpaint · (1 − mask)` with the mask broadcast over channels.
pub fn blend<T: Scalar>(warped: &Tensor<T>, mask: &OcclusionMask<T>, inpaint: &Tensor<T>) -> Tensor<T> {
    let n = warped.plane_len();
    let m = mask.0.plane(0);
    let mut out = warped.clone();
    for c in 0..warped.c {
        for i in 0..n {
            let k = c * n + i;
            let v = warped.data[k] * m[i] + inpaint.data[k] * (T::one() - m[i]);
            out.data[k] = v.max(T::zero()).min(T::one());
        }
    }
    out
}

/// Gradients of [`synthesize`] w.r.t. each input.
#[derive(Clone, Debug)]
pub struct SynthesizeGrads<T> {
    pub source: Tensor<T>,
    pub shift: ShiftMap<T>,
    pub mask: Tensor<T>,
    pub inpaint: Tensor<T>,
}

pub fn synthesize_backward<T: Scalar>(
    source: &Tensor<T>,
    shift: &ShiftMap<T>,
    mask: &OcclusionMask<T>,
    inpaint: &Tensor<T>,
    border: Border,
    grad_out: &Tensor<T>,
) -> Result<SynthesizeGrads<T>> {
    check(source, shift, mask, inpaint)?;
    source.ensure_shape(grad_out, "synthesize_backward")?;
    let warped = grid_sample(source, shift, border)?;
    let (c, h, w) = source.shape();
    let n = h * w;
    let m = mask.0.plane(0);
    let mut g_warped = Tensor::zeros(c, h, w);
    let mut g_inpaint = Tensor::zeros(c, h, w);
    let mut g_mask = Tensor::zeros(1, h, w);
    for ch in 0..c {
        for i in 0..n {
            let k = ch * n + i;
            let pre = warped.data[k] * m[i] + inpaint.data[k] * (T::one() - m[i]);
            // clamp passes gradient only strictly inside the range
            let g = if pre > T::zero() && pre < T::one() { grad_out.data[k] } else { T::zero() };
            g_warped.data[k] = g * m[i];
            g_inpaint.data[k] = g * (T::one() - m[i]);
            g_mask.data[i] = g_mask.data[i] + g * (warped.data[k] - inpaint.data[k]);
        }
    }
    let (g_source, g_shift) = grid_sample_backward(source, shift, border, &g_warped)?;
    Ok(SynthesizeGrads { source: g_source, shift: g_shift, mask: g_mask, inpaint: g_inpaint })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: f64) -> Tensor<f64> {
        Tensor::from_fn(3, 5, 6, |c, y, x| 0.5 + 0.4 * ((c * 31 + y * 7 + x) as f64 * seed).sin())
    }

    #[test]
    fn full_mask_returns_the_warp() {
        let src = img(0.3);
        let shift = ShiftMap(Tensor::from_fn(2, 5, 6, |c, y, x| ((c + y + x) as f64 * 0.7).cos()));
        let out = synthesize(&src, &shift, &OcclusionMask::ones(5, 6), &img(0.9), Border::Clamp).unwrap();
        assert_eq!(out, grid_sample(&src, &shift, Border::Clamp).unwrap());
    }

    #[test]
    fn empty_mask_returns_the_inpainting() {
        let mask = OcclusionMask(Tensor::zeros(1, 5, 6));
        let inp = img(0.9);
        let out = synthesize(&img(0.3), &ShiftMap::zeros(5, 6), &mask, &inp, Border::Clamp).unwrap();
        assert_eq!(out, inp);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mask = OcclusionMask::ones(5, 5);
        assert!(synthesize(&img(0.3), &ShiftMap::zeros(5, 6), &mask, &img(0.9), Border::Clamp).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let src = img(0.3);
        let inp = img(1.7);
        let shift = ShiftMap(Tensor::from_fn(2, 5, 6, |c, y, x| 0.6 * ((c * 3 + y * 5 + x) as f64 * 0.9).sin() + 0.13));
        let mask = OcclusionMask(Tensor::from_fn(1, 5, 6, |_, y, x| 0.5 + 0.4 * ((y * 6 + x) as f64).cos()));
        let weights = Tensor::from_fn(3, 5, 6, |c, y, x| ((c + 2 * y + 3 * x) as f64 * 0.41).sin());
        let loss = |s: &ShiftMap<f64>, m: &OcclusionMask<f64>, p: &Tensor<f64>| -> f64 {
            let out = synthesize(&src, s, m, p, Border::Zeros).unwrap();
            out.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        };
        let g = synthesize_backward(&src, &shift, &mask, &inp, Border::Zeros, &weights).unwrap();
        let eps = 1e-6;
        for i in [0, 7, 13, 29, 30, 44, 59] {
            let mut sp = shift.clone();
            sp.0.data[i] += eps;
            let mut sm = shift.clone();
            sm.0.data[i] -= eps;
            let num = (loss(&sp, &mask, &inp) - loss(&sm, &mask, &inp)) / (2.0 * eps);
            assert!((num - g.shift.0.data[i]).abs() < 1e-6, "shift {i}: {num} vs {}", g.shift.0.data[i]);
        }
        for i in [0, 11, 29] {
            let mut mp = mask.clone();
            mp.0.data[i] += eps;
            let mut mm = mask.clone();
            mm.0.data[i] -= eps;
            let num = (loss(&shift, &mp, &inp) - loss(&shift, &mm, &inp)) / (2.0 * eps);
            assert!((num - g.mask.data[i]).abs() < 1e-6);
        }
        for i in [3, 50, 89] {
            let mut pp = inp.clone();
            pp.data[i] += eps;
            let mut pm = inp.clone();
            pm.data[i] -= eps;
            let num = (loss(&shift, &mask, &pp) - loss(&shift, &mask, &pm)) / (2.0 * eps);
            assert!((num - g.inpaint.data[i]).abs() < 1e-6);
        }
    }
}
