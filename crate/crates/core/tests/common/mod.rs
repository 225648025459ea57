//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use cheapnvs::geometry::{Extrinsics, Intrinsics};
use cheapnvs::warp::{OcclusionMask, RgbdFrame, ShiftMap, WarpLabels};
use cheapnvs::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// For every target pixel, scan every source pixel and keep the nearest
/// landing one (ties to the lower raster index). Landing positions use the
/// pinhole model written out directly.
pub fn brute_force(frame: &RgbdFrame<f32>, pose: &Extrinsics<f32>, k: &Intrinsics<f32>) -> WarpLabels<f32> {
    let (h, w) = (frame.height(), frame.width());
    let n = h * w;
    let land = |x: usize, y: usize| -> Option<(i64, i64, f32)> {
        let d = frame.depth.data[y * w + x];
        let p = [(x as f32 - k.cx) * d / k.fx, (y as f32 - k.cy) * d / k.fy, d];
        let r = &pose.r;
        let q = [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + pose.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + pose.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + pose.t[2],
        ];
        if !(q[2] > 0.0) || !q[2].is_finite() {
            return None;
        }
        let u = k.fx * q[0] / q[2] + k.cx;
        let v = k.fy * q[1] / q[2] + k.cy;
        let (qx, qy) = ((u + 0.5).floor(), (v + 0.5).floor());
        if !(qx >= 0.0 && qx < w as f32 && qy >= 0.0 && qy < h as f32) {
            return None;
        }
        Some((qx as i64, qy as i64, q[2]))
    };
    let mut shift = Tensor::zeros(2, h, w);
    let mut mask = Tensor::zeros(1, h, w);
    let mut warped = Tensor::zeros(3, h, w);
    let mut tdepth = Tensor::filled(1, h, w, f32::MAX);
    for ty in 0..h {
        for tx in 0..w {
            let mut best: Option<(f32, usize)> = None;
            for sy in 0..h {
                for sx in 0..w {
                    let Some((qx, qy, z)) = land(sx, sy) else { continue };
                    if (qx, qy) != (tx as i64, ty as i64) {
                        continue;
                    }
                    let src = sy * w + sx;
                    // raster order visits lower indices first, so strict < keeps them on ties
                    if best.is_none_or(|(bz, _)| z < bz) {
                        best = Some((z, src));
                    }
                }
            }
            if let Some((z, src)) = best {
                let q = ty * w + tx;
                shift.data[q] = (src % w) as f32 - tx as f32;
                shift.data[n + q] = (src / w) as f32 - ty as f32;
                mask.data[q] = 1.0;
                for c in 0..3 {
                    warped.data[c * n + q] = frame.rgb.data[c * n + src];
                }
                tdepth.data[q] = z;
            }
        }
    }
    WarpLabels { shift: ShiftMap(shift), mask: OcclusionMask(mask), warped_rgb: warped, target_depth: tdepth }
}

pub fn random_frame(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RgbdFrame<f32> {
    let rgb = Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0f32..=1.0));
    // a few discrete levels produce exact depth ties; the rest are continuous
    let quantized = rng.gen_bool(0.5);
    let depth = Tensor::from_fn(1, h, w, |_, _, _| if quantized { [0.8f32, 1.0, 1.5][rng.gen_range(0..3)] } else { rng.gen_range(0.5f32..3.0) });
    RgbdFrame::new(rgb, depth).unwrap()
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Extrinsics<f32> {
    let a = 0.25f32;
    let t = [rng.gen_range(-0.5f32..0.5), rng.gen_range(-0.5f32..0.5), rng.gen_range(-0.4f32..0.4)];
    Extrinsics::from_euler(rng.gen_range(-a..a), rng.gen_range(-a..a), rng.gen_range(-a..a), t)
}

pub fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data.iter().map(|v| v.to_bits()).collect()
}

pub fn assert_bit_equal(a: &WarpLabels<f32>, b: &WarpLabels<f32>, case: &str) {
    assert_eq!(bits(&a.shift.0), bits(&b.shift.0), "shift, {case}");
    assert_eq!(bits(&a.mask.0), bits(&b.mask.0), "mask, {case}");
    assert_eq!(bits(&a.warped_rgb), bits(&b.warped_rgb), "warped, {case}");
    assert_eq!(bits(&a.target_depth), bits(&b.target_depth), "depth, {case}");
}

