//! Conventional depth-based 3D warping and bilinear grid sampling.
//!
//! [`forward_warp`] is the label generator: it splats every source pixel into
//! the target view through a z-buffer and records, per target pixel, the
//! backward offset to the source pixel that won. [`grid_sample`] consumes
//! such offsets to pull colors from the source image.

use rayon::prelude::*;

use crate::compositor;
use crate::error::{Error, Result};
use crate::geometry::{project, transform_point, unproject, Extrinsics, Intrinsics};
use crate::scalar::Scalar;
use crate::teacher::InpaintTeacher;
use crate::tensor::Tensor;

/// Source rows handled per parallel task. Fixed so the work split does not
/// depend on the thread pool.
const ROWS_PER_TASK: usize = 16;

/// RGB image (`3×H×W`, values in `[0,1]`) with an aligned positive depth map (`1×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
}

impl<T: Scalar> RgbdFrame<T> {
    pub fn new(rgb: Tensor<T>, depth: Tensor<T>) -> Result<Self> {
        let f = Self { rgb, depth };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb.c != 3 || self.depth.c != 1 {
            return Err(Error::Shape(format!(
                "expected 3-channel rgb and 1-channel depth, got {} and {}",
                self.rgb.c, self.depth.c
            )));
        }
        if !self.rgb.same_spatial(&self.depth) {
            return Err(Error::ResolutionMismatch {
                rgb: (self.rgb.h, self.rgb.w),
                depth: (self.depth.h, self.depth.w),
            });
        }
        if self.rgb.data.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Domain("rgb values must lie in [0,1]".into()));
        }
        if self.depth.data.iter().any(|&d| !(d > T::zero()) || !d.is_finite()) {
            return Err(Error::Domain("depth must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.rgb.h
    }

    pub fn width(&self) -> usize {
        self.rgb.w
    }

    pub fn median_depth(&self) -> T {
        median(&self.depth.data)
    }

    pub fn flip_x(&self) -> Self {
        Self { rgb: self.rgb.flip_x(), depth: self.depth.flip_x() }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self { rgb: self.rgb.crop(y0, x0, h, w), depth: self.depth.crop(y0, x0, h, w) }
    }

    pub fn cast<U: Scalar>(&self) -> RgbdFrame<U> {
        RgbdFrame { rgb: self.rgb.cast(), depth: self.depth.cast() }
    }
}

pub(crate) fn median<T: Scalar>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) * T::half()
    }
}

/// Per-target-pixel backward offsets `(dx, dy)` in pixels, `2×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMap<T>(pub Tensor<T>);

impl<T: Scalar> ShiftMap<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(2, h, w))
    }

    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.c != 2 {
            return Err(Error::Shape(format!("shift map needs 2 channels, got {}", t.c)));
        }
        Ok(Self(t))
    }

    pub fn dx(&self, y: usize, x: usize) -> T {
        self.0.at(0, y, x)
    }

    pub fn dy(&self, y: usize, x: usize) -> T {
        self.0.at(1, y, x)
    }
}

/// Blend weight per pixel, `1×H×W`: 1 = visible from the source, 0 = hole.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask<T>(pub Tensor<T>);

impl<T: Scalar> OcclusionMask<T> {
    pub fn ones(h: usize, w: usize) -> Self {
        Self(Tensor::filled(1, h, w, T::one()))
    }

    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.c != 1 {
            return Err(Error::Shape(format!("mask needs 1 channel, got {}", t.c)));
        }
        if t.data.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Domain("mask values must lie in [0,1]".into()));
        }
        Ok(Self(t))
    }

    /// Hard threshold at 0.5.
    pub fn binarize(&self) -> Self {
        Self(self.0.map(|v| if v >= T::half() { T::one() } else { T::zero() }))
    }

    /// `1 − mask`.
    pub fn holes(&self) -> Tensor<T> {
        self.0.map(|v| T::one() - v)
    }

    pub fn coverage(&self) -> f64 {
        let n = self.0.data.len().max(1);
        self.0.data.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64
    }
}

/// Oracle output of [`forward_warp`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarpLabels<T> {
    pub shift: ShiftMap<T>,
    pub mask: OcclusionMask<T>,
    pub warped_rgb: Tensor<T>,
    /// `1×H×W`; holes hold [`hole_depth`].
    pub target_depth: Tensor<T>,
}

/// Target-depth value marking pixels no source pixel reached.
pub fn hole_depth<T: Scalar>() -> T {
    T::max_value()
}

/// Where source pixel `(x, y)` lands in the target view: `(target index, depth)`.
///
/// Rounds to the nearest pixel with `floor(u + 0.5)`; candidates behind the
/// camera or outside the image are dropped.
#[inline]
pub fn splat_target<T: Scalar>(
    x: usize,
    y: usize,
    depth: T,
    pose: &Extrinsics<T>,
    k: &Intrinsics<T>,
) -> Option<(usize, T)> {
    let px = [T::from_usize(x)?, T::from_usize(y)?];
    let cam = unproject(px, depth, k).ok()?;
    let moved = transform_point(cam, pose);
    let (uv, z) = project(moved, k).ok()?;
    if !z.is_finite() {
        return None;
    }
    let qx = (uv[0] + T::half()).floor();
    let qy = (uv[1] + T::half()).floor();
    let (w, h) = (T::from_usize(k.width)?, T::from_usize(k.height)?);
    if !(qx >= T::zero() && qx < w && qy >= T::zero() && qy < h) {
        return None;
    }
    Some((qy.to_usize()? * k.width + qx.to_usize()?, z))
}

#[derive(Clone, Copy)]
struct ZEntry<T> {
    z: T,
    src: usize,
}

impl<T: Scalar> ZEntry<T> {
    /// Total order: nearer first, then lower source raster index.
    #[inline]
    fn beats(&self, other: &Self) -> bool {
        self.z < other.z || (self.z == other.z && self.src < other.src)
    }
}

/// Depth-based forward warp with a nearest-pixel z-buffer.
///
/// Output is independent of thread count: rows are splatted in parallel and
/// merged under a total (depth, source index) order.
pub fn forward_warp<T: Scalar>(
    frame: &RgbdFrame<T>,
    pose: &Extrinsics<T>,
    k: &Intrinsics<T>,
) -> Result<WarpLabels<T>> {
    let (h, w) = (frame.height(), frame.width());
    if k.width != w || k.height != h {
        return Err(Error::Shape(format!(
            "intrinsics for {}x{} applied to {}x{} frame",
            k.width, k.height, w, h
        )));
    }
    if frame.depth.c != 1 || !frame.depth.same_spatial(&frame.rgb) {
        return Err(Error::ResolutionMismatch {
            rgb: (frame.rgb.h, frame.rgb.w),
            depth: (frame.depth.h, frame.depth.w),
        });
    }
    let depth = frame.depth.plane(0);

    let candidates: Vec<Vec<(usize, ZEntry<T>)>> = (0..h)
        .step_by(ROWS_PER_TASK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|y0| {
            let mut out = Vec::with_capacity(ROWS_PER_TASK * w);
            for y in y0..(y0 + ROWS_PER_TASK).min(h) {
                for x in 0..w {
                    let src = y * w + x;
                    if let Some((q, z)) = splat_target(x, y, depth[src], pose, k) {
                        out.push((q, ZEntry { z, src }));
                    }
                }
            }
            out
        })
        .collect();

    let mut zbuf: Vec<Option<ZEntry<T>>> = vec![None; h * w];
    for (q, e) in candidates.into_iter().flatten() {
        match &zbuf[q] {
            Some(cur) if !e.beats(cur) => {}
            _ => zbuf[q] = Some(e),
        }
    }
    Ok(labels_from_zbuffer(frame, &zbuf))
}

fn labels_from_zbuffer<T: Scalar>(frame: &RgbdFrame<T>, zbuf: &[Option<ZEntry<T>>]) -> WarpLabels<T> {
    let (h, w) = (frame.height(), frame.width());
    let n = h * w;
    let mut shift = Tensor::zeros(2, h, w);
    let mut mask = Tensor::zeros(1, h, w);
    let mut warped = Tensor::zeros(3, h, w);
    let mut tdepth = Tensor::filled(1, h, w, hole_depth());
    for (q, e) in zbuf.iter().enumerate() {
        let Some(e) = e else { continue };
        let (qy, qx) = (q / w, q % w);
        let (py, px) = (e.src / w, e.src % w);
        shift.data[q] = T::from_usize(px).unwrap() - T::from_usize(qx).unwrap();
        shift.data[n + q] = T::from_usize(py).unwrap() - T::from_usize(qy).unwrap();
        mask.data[q] = T::one();
        for c in 0..3 {
            warped.data[c * n + q] = frame.rgb.data[c * n + e.src];
        }
        tdepth.data[q] = e.z;
    }
    WarpLabels { shift: ShiftMap(shift), mask: OcclusionMask(mask), warped_rgb: warped, target_depth: tdepth }
}

/// Out-of-range handling for [`grid_sample`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Border {
    /// Sample coordinates are clamped into the image.
    #[default]
    Clamp,
    /// Taps outside the image read as zero.
    Zeros,
}

impl std::str::FromStr for Border {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamp" => Ok(Border::Clamp),
            "zeros" => Ok(Border::Zeros),
            other => Err(Error::Config(format!("unknown border mode {other:?}"))),
        }
    }
}

/// Bilinear footprint of one sample: up to four taps and the partial
/// derivatives of the weights w.r.t. the sample coordinate.
struct Taps<T> {
    idx: [Option<usize>; 4],
    wgt: [T; 4],
    /// d(weight)/d(sx), d(weight)/d(sy); zero where the coordinate is clamped.
    dwx: [T; 4],
    dwy: [T; 4],
}

#[inline]
fn taps<T: Scalar>(sx: T, sy: T, h: usize, w: usize, border: Border) -> Taps<T> {
    let (zero, one) = (T::zero(), T::one());
    let wmax = T::from_usize(w - 1).unwrap();
    let hmax = T::from_usize(h - 1).unwrap();
    let (mut sx, mut sy) = (sx, sy);
    let (mut gx, mut gy) = (one, one);
    if border == Border::Clamp {
        if !(sx > zero && sx < wmax) {
            gx = zero;
            sx = sx.max(zero).min(wmax);
        }
        if !(sy > zero && sy < hmax) {
            gy = zero;
            sy = sy.max(zero).min(hmax);
        }
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let wgt = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
    let dwx = [-(one - fy) * gx, (one - fy) * gx, -fy * gx, fy * gx];
    let dwy = [-(one - fx) * gy, -fx * gy, (one - fx) * gy, fx * gy];
    let mut idx = [None; 4];
    let x0i = x0.to_i64().unwrap_or(i64::MIN / 2);
    let y0i = y0.to_i64().unwrap_or(i64::MIN / 2);
    for (k, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let (mut xi, mut yi) = (x0i + dx, y0i + dy);
        if border == Border::Clamp {
            xi = xi.min(w as i64 - 1);
            yi = yi.min(h as i64 - 1);
        }
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            idx[k] = Some(yi as usize * w + xi as usize);
        }
    }
    Taps { idx, wgt, dwx, dwy }
}

/// `out(q) = image(q + shift(q))`, bilinearly interpolated.
pub fn grid_sample<T: Scalar>(image: &Tensor<T>, shift: &ShiftMap<T>, border: Border) -> Result<Tensor<T>> {
    if !image.same_spatial(&shift.0) || shift.0.c != 2 {
        return Err(Error::Shape(format!(
            "grid_sample image {:?} with shift {:?}",
            image.shape(),
            shift.0.shape()
        )));
    }
    let (c, h, w) = image.shape();
    let n = h * w;
    let mut out = Tensor::zeros(c, h, w);
    if n == 0 {
        return Ok(out);
    }
    for y in 0..h {
        for x in 0..w {
            let q = y * w + x;
            let sx = T::from_usize(x).unwrap() + shift.0.data[q];
            let sy = T::from_usize(y).unwrap() + shift.0.data[n + q];
            let tp = taps(sx, sy, h, w, border);
            for ch in 0..c {
                let plane = &image.data[ch * n..(ch + 1) * n];
                let mut acc = T::zero();
                for k in 0..4 {
                    if let Some(i) = tp.idx[k] {
                        acc = acc + plane[i] * tp.wgt[k];
                    }
                }
                out.data[ch * n + q] = acc;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`grid_sample`]: returns `(d image, d shift)`.
pub fn grid_sample_backward<T: Scalar>(
    image: &Tensor<T>,
    shift: &ShiftMap<T>,
    border: Border,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ShiftMap<T>)> {
    image.ensure_shape(grad_out, "grid_sample_backward")?;
    let (c, h, w) = image.shape();
    let n = h * w;
    let mut gimg = Tensor::zeros(c, h, w);
    let mut gshift = Tensor::zeros(2, h, w);
    for y in 0..h {
        for x in 0..w {
            let q = y * w + x;
            let sx = T::from_usize(x).unwrap() + shift.0.data[q];
            let sy = T::from_usize(y).unwrap() + shift.0.data[n + q];
            let tp = taps(sx, sy, h, w, border);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for ch in 0..c {
                let g = grad_out.data[ch * n + q];
                for k in 0..4 {
                    if let Some(i) = tp.idx[k] {
                        let v = image.data[ch * n + i];
                        gimg.data[ch * n + i] = gimg.data[ch * n + i] + g * tp.wgt[k];
                        gx = gx + g * v * tp.dwx[k];
                        gy = gy + g * v * tp.dwy[k];
                    }
                }
            }
            gshift.data[q] = gx;
            gshift.data[n + q] = gy;
        }
    }
    Ok((gimg, ShiftMap(gshift)))
}

/// Everything one training example needs: the input, its pose and all
/// ground-truth targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample<T> {
    pub frame: RgbdFrame<T>,
    pub pose: Extrinsics<T>,
    pub shift: ShiftMap<T>,
    pub mask: OcclusionMask<T>,
    /// Teacher fill of the masked warped image.
    pub inpaint: Tensor<T>,
    /// Ground-truth novel view composed from the components above.
    pub target: Tensor<T>,
    pub warped_rgb: Tensor<T>,
}

/// Warps `frame` with the oracle, fills holes with `teacher` and composes the
/// full target view.
pub fn make_labels<T: Scalar, P: InpaintTeacher<T> + ?Sized>(
    frame: &RgbdFrame<T>,
    pose: &Extrinsics<T>,
    k: &Intrinsics<T>,
    teacher: &P,
) -> Result<TrainingSample<T>> {
    compose_labels(frame, pose, forward_warp(frame, pose, k)?, teacher)
}

/// Completes a training sample from already computed warp labels.
pub fn compose_labels<T: Scalar, P: InpaintTeacher<T> + ?Sized>(
    frame: &RgbdFrame<T>,
    pose: &Extrinsics<T>,
    labels: WarpLabels<T>,
    teacher: &P,
) -> Result<TrainingSample<T>> {
    let holes = labels.mask.holes();
    let inpaint = teacher.fill(&labels.warped_rgb, &holes)?;
    if !inpaint.same_shape(&labels.warped_rgb) {
        return Err(Error::Teacher(format!(
            "teacher returned {:?} for a {:?} image",
            inpaint.shape(),
            labels.warped_rgb.shape()
        )));
    }
    if inpaint.data.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Teacher("teacher output outside [0,1]".into()));
    }
    let target = compositor::synthesize(&frame.rgb, &labels.shift, &labels.mask, &inpaint, Border::Clamp)?;
    Ok(TrainingSample {
        frame: frame.clone(),
        pose: *pose,
        shift: labels.shift,
        mask: labels.mask,
        inpaint,
        target,
        warped_rgb: labels.warped_rgb,
    })
}
