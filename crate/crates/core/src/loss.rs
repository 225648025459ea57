//! Training losses, their gradients w.r.t. the decoder outputs, and the
//! staged weighting schedule.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::metrics::ssim_plane_grad;
use crate::model::{Prediction, PredictionGrads};
use crate::nn::ops::{sigmoid, softplus};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::TrainingSample;

/// Loss weights: `inpaint` is λ1, `mask` λ2, `flow` λ3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub inpaint: f64,
    pub mask: f64,
    pub flow: f64,
}

impl LossWeights {
    pub const ALL: Self = Self { inpaint: 1.0, mask: 1.0, flow: 1.0 };
}

/// Inpainting is switched off until `activation_epoch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSchedule {
    pub activation_epoch: usize,
    pub active: LossWeights,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self { activation_epoch: 5, active: LossWeights::ALL }
    }
}

pub fn lambda_schedule(epoch: usize, sched: &LossSchedule) -> LossWeights {
    if epoch < sched.activation_epoch {
        LossWeights { inpaint: 0.0, ..sched.active }
    } else {
        sched.active
    }
}

/// Pixels the inpainting L1 is measured over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InpaintRegion {
    #[default]
    Holes,
    Full,
}

impl std::str::FromStr for InpaintRegion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holes" => Ok(Self::Holes),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown inpaint region {other:?} (expected holes|full)"))),
        }
    }
}

/// Extra image loss on the inpainting output, weighted under λ1.
pub trait InpaintLoss<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    /// Loss value and gradient w.r.t. `pred`.
    fn value_and_grad(&self, pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>);
}

#[derive(Clone)]
pub struct LossConfig<T> {
    pub inpaint_region: InpaintRegion,
    /// `(weight, loss)` pairs added to the inpainting term.
    pub plugins: Vec<(f64, Arc<dyn InpaintLoss<T>>)>,
}

impl<T> Default for LossConfig<T> {
    fn default() -> Self {
        Self { inpaint_region: InpaintRegion::Holes, plugins: Vec::new() }
    }
}

impl<T> std::fmt::Debug for LossConfig<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LossConfig").field("inpaint_region", &self.inpaint_region).field("plugins", &self.plugins.len()).finish()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub flow: f64,
    pub mask: f64,
    /// L1 part plus weighted plug-ins.
    pub inpaint: f64,
}

impl LossReport {
    pub fn add(&mut self, o: &LossReport) {
        self.total += o.total;
        self.flow += o.flow;
        self.mask += o.mask;
        self.inpaint += o.inpaint;
    }

    pub fn scale(&mut self, s: f64) {
        self.total *= s;
        self.flow *= s;
        self.mask *= s;
        self.inpaint *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.flow.is_finite() && self.mask.is_finite() && self.inpaint.is_finite()
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Per-sample weighted loss and its gradient w.r.t. the outputs.
///
/// Flow L1 is averaged over visible pixels and both channels, mask BCE over
/// all pixels, inpaint L1 over hole pixels and three channels (or the whole
/// image with [`InpaintRegion::Full`]). An empty region contributes zero.
pub fn loss_total<T: Scalar>(
    pred: &Prediction<T>,
    gt: &TrainingSample<T>,
    lambda: LossWeights,
    cfg: &LossConfig<T>,
) -> Result<(LossReport, PredictionGrads<T>)> {
    pred.shift.0.ensure_shape(&gt.shift.0, "shift")?;
    pred.mask_logits.ensure_shape(&gt.mask.0, "mask")?;
    pred.inpaint.ensure_shape(&gt.inpaint, "inpaint")?;
    let (h, w) = (gt.mask.0.h, gt.mask.0.w);
    let n = h * w;
    let mask = gt.mask.0.plane(0);
    let half = T::half();

    // flow
    let visible = mask.iter().filter(|&&m| m >= half).count();
    let mut d_shift = Tensor::zeros(2, h, w);
    let mut l_flow = 0.0;
    if visible > 0 {
        let norm = (2 * visible) as f64;
        let g = T::from_f64c(lambda.flow / norm);
        for c in 0..2 {
            for i in (0..n).filter(|&i| mask[i] >= half) {
                let d = pred.shift.0.data[c * n + i] - gt.shift.0.data[c * n + i];
                l_flow += d.as_f64().abs();
                d_shift.data[c * n + i] = sign(d) * g;
            }
        }
        l_flow /= norm;
    }

    // mask: BCE(z, y) = softplus(z) − y·z
    let mut d_logits = Tensor::zeros(1, h, w);
    let mut l_mask = 0.0;
    let g = T::from_f64c(lambda.mask / n as f64);
    for i in 0..n {
        let (z, y) = (pred.mask_logits.data[i], mask[i]);
        l_mask += (softplus(z) - y * z).as_f64();
        d_logits.data[i] = (sigmoid(z) - y) * g;
    }
    l_mask /= n as f64;

    // inpaint
    let in_region = |i: usize| match cfg.inpaint_region {
        InpaintRegion::Holes => mask[i] < half,
        InpaintRegion::Full => true,
    };
    let count = (0..n).filter(|&i| in_region(i)).count();
    let mut d_inpaint = Tensor::zeros(3, h, w);
    let mut l_inpaint = 0.0;
    if count > 0 {
        let norm = (3 * count) as f64;
        let g = T::from_f64c(lambda.inpaint / norm);
        for c in 0..3 {
            for i in (0..n).filter(|&i| in_region(i)) {
                let d = pred.inpaint.data[c * n + i] - gt.inpaint.data[c * n + i];
                l_inpaint += d.as_f64().abs();
                d_inpaint.data[c * n + i] = sign(d) * g;
            }
        }
        l_inpaint /= norm;
    }
    for (weight, plugin) in &cfg.plugins {
        let (v, g) = plugin.value_and_grad(&pred.inpaint, &gt.inpaint);
        l_inpaint += weight * v;
        let s = T::from_f64c(weight * lambda.inpaint);
        for (d, gv) in d_inpaint.data.iter_mut().zip(&g.data) {
            *d = *d + s * *gv;
        }
    }

    let total = lambda.inpaint * l_inpaint + lambda.mask * l_mask + lambda.flow * l_flow;
    Ok((
        LossReport { total, flow: l_flow, mask: l_mask, inpaint: l_inpaint },
        PredictionGrads { shift: d_shift, mask_logits: d_logits, inpaint: d_inpaint },
    ))
}

/// `1 − SSIM`, averaged over the three colour channels.
#[derive(Clone, Copy, Debug, Default)]
pub struct SsimLoss;

impl<T: Scalar> InpaintLoss<T> for SsimLoss {
    fn name(&self) -> &str {
        "ssim"
    }

    fn value_and_grad(&self, pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
        let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
        let mut total = 0.0;
        for c in 0..pred.c {
            let a: Vec<f64> = pred.plane(c).iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = target.plane(c).iter().map(|v| v.as_f64()).collect();
            let Ok((s, g)) = ssim_plane_grad(&a, &b, pred.h, pred.w) else {
                // too small for the window: no contribution
                return (0.0, grad);
            };
            total += 1.0 - s;
            for (d, gv) in grad.plane_mut(c).iter_mut().zip(g) {
                *d = T::from_f64c(-gv / pred.c as f64);
            }
        }
        (total / pred.c as f64, grad)
    }
}

/// Focal frequency loss: spectrum distance with per-frequency weights
/// `|ΔF|^alpha / max|ΔF|^alpha`, treated as constants.
#[derive(Clone, Copy, Debug)]
pub struct FocalFrequencyLoss {
    pub alpha: f64,
}

impl Default for FocalFrequencyLoss {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// Unitary 2-D DFT of a row-major `h×w` plane, in place.
fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    let s = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= s;
    }
}

impl<T: Scalar> InpaintLoss<T> for FocalFrequencyLoss {
    fn name(&self) -> &str {
        "focal_frequency"
    }

    fn value_and_grad(&self, pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
        let n = pred.h * pred.w;
        let norm = (n * pred.c) as f64;
        let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
        let mut total = 0.0;
        for c in 0..pred.c {
            let mut d: Vec<Complex<f64>> =
                pred.plane(c).iter().zip(target.plane(c)).map(|(a, b)| Complex::new(a.as_f64() - b.as_f64(), 0.0)).collect();
            fft2(&mut d, pred.h, pred.w, false);
            let mag: Vec<f64> = d.iter().map(|v| v.norm().powf(self.alpha)).collect();
            let max = mag.iter().cloned().fold(0.0, f64::max);
            if max == 0.0 {
                continue;
            }
            for (v, m) in d.iter_mut().zip(&mag) {
                let wgt = m / max;
                total += wgt * v.norm_sqr();
                *v *= wgt;
            }
            // d/dx Σ w|Fx|² = 2·Re(F⁻¹(w ⊙ Fx)) for a unitary F
            fft2(&mut d, pred.h, pred.w, true);
            for (g, v) in grad.plane_mut(c).iter_mut().zip(&d) {
                *g = T::from_f64c(2.0 * v.re / norm);
            }
        }
        (total / norm, grad)
    }
}

/// Differentiable feature map supplied by the caller (e.g. a pretrained
/// network). Nothing is bundled.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn features(&self, image: &Tensor<T>) -> Tensor<T>;
    /// Vector-Jacobian product: gradient w.r.t. `image` given `d_features`.
    fn backward(&self, image: &Tensor<T>, d_features: &Tensor<T>) -> Tensor<T>;
}

/// Mean L1 distance between extracted features.
pub struct PerceptualLoss<T> {
    pub extractor: Arc<dyn FeatureExtractor<T>>,
}

impl<T: Scalar> InpaintLoss<T> for PerceptualLoss<T> {
    fn name(&self) -> &str {
        "perceptual"
    }

    fn value_and_grad(&self, pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
        let fp = self.extractor.features(pred);
        let ft = self.extractor.features(target);
        let n = fp.data.len().max(1) as f64;
        let mut d = fp.clone();
        let mut total = 0.0;
        for (g, (&a, &b)) in d.data.iter_mut().zip(fp.data.iter().zip(&ft.data)) {
            total += (a - b).as_f64().abs();
            *g = sign(a - b) * T::from_f64c(1.0 / n);
        }
        (total / n, self.extractor.backward(pred, &d))
    }
}
