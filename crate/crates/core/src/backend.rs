//! Flat-buffer boundary for the forward warp and backend selection.
//!
//! Buffers are contiguous `f32`, pixel-interleaved (`H·W·C`, channel fastest).
//! The reference implementation is exported as a C symbol so an external
//! kernel can be tested against it through the same signature.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geometry::{Extrinsics, Intrinsics};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::{forward_warp, OcclusionMask, RgbdFrame, ShiftMap, WarpLabels};

pub const STATUS_OK: i32 = 0;
pub const STATUS_NULL_POINTER: i32 = 1;
pub const STATUS_DIMENSION_MISMATCH: i32 = 2;
pub const STATUS_INVALID_INPUT: i32 = 3;
pub const STATUS_PANIC: i32 = 4;

/// Signature shared by the reference symbol and any native kernel.
///
/// Inputs: `rgb` (`h·w·3`), `depth` (`h·w`), `pose` (12, row-major `[R|t]`),
/// `intrinsics` (`fx, fy, cx, cy, width, height`). Outputs: `shift`
/// (`h·w·2`), `mask` (`h·w`), `warped` (`h·w·3`), `target_depth` (`h·w`).
pub type WarpKernelFn = unsafe extern "C" fn(
    rgb: *const f32,
    depth: *const f32,
    height: u32,
    width: u32,
    pose: *const f32,
    intrinsics: *const f32,
    shift: *mut f32,
    mask: *mut f32,
    warped: *mut f32,
    target_depth: *mut f32,
) -> i32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WarpBackend {
    #[default]
    Reference,
    Native,
}

impl fmt::Display for WarpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarpBackend::Reference => "reference",
            WarpBackend::Native => "native",
        })
    }
}

impl FromStr for WarpBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reference" => Ok(Self::Reference),
            "native" => Ok(Self::Native),
            other => Err(Error::Config(format!("unknown warp backend {other:?} (expected reference|native)"))),
        }
    }
}

static NATIVE_KERNEL: OnceLock<WarpKernelFn> = OnceLock::new();

/// Installs the kernel used by [`WarpBackend::Native`]. Returns `false` if one
/// was already installed.
pub fn register_native_kernel(kernel: WarpKernelFn) -> bool {
    NATIVE_KERNEL.set(kernel).is_ok()
}

pub fn native_kernel() -> Option<WarpKernelFn> {
    NATIVE_KERNEL.get().copied()
}

impl WarpBackend {
    pub fn forward_warp<T: Scalar>(self, frame: &RgbdFrame<T>, pose: &Extrinsics<T>, k: &Intrinsics<T>) -> Result<WarpLabels<T>> {
        match self {
            WarpBackend::Reference => forward_warp(frame, pose, k),
            WarpBackend::Native => {
                let kernel = native_kernel()
                    .ok_or_else(|| Error::Config("warp_backend = native but no native kernel is registered".into()))?;
                let input = FlatWarpInput::from_frame(frame, pose, k);
                let out = input.run(kernel)?;
                Ok(out.to_labels(frame.height(), frame.width()))
            }
        }
    }
}

/// Owned flat inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatWarpInput {
    pub height: u32,
    pub width: u32,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub pose: [f32; 12],
    pub intrinsics: [f32; 6],
}

/// Owned flat outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatWarpOutput {
    pub shift: Vec<f32>,
    pub mask: Vec<f32>,
    pub warped: Vec<f32>,
    pub target_depth: Vec<f32>,
}

impl FlatWarpOutput {
    pub fn zeros(h: usize, w: usize) -> Self {
        let n = h * w;
        Self { shift: vec![0.0; 2 * n], mask: vec![0.0; n], warped: vec![0.0; 3 * n], target_depth: vec![0.0; n] }
    }

    pub fn to_labels<T: Scalar>(&self, h: usize, w: usize) -> WarpLabels<T> {
        let depth = Tensor::from_vec(1, h, w, self.target_depth.clone()).expect("sized by caller");
        let hole = crate::warp::hole_depth::<f32>();
        WarpLabels {
            shift: ShiftMap(deinterleave(&self.shift, 2, h, w).cast()),
            mask: OcclusionMask(deinterleave(&self.mask, 1, h, w).cast()),
            warped_rgb: deinterleave(&self.warped, 3, h, w).cast(),
            // keep the sentinel at the target type's maximum
            target_depth: Tensor::from_fn(1, h, w, |_, y, x| {
                let v = depth.at(0, y, x);
                if v == hole {
                    crate::warp::hole_depth()
                } else {
                    T::from_f32(v).unwrap()
                }
            }),
        }
    }

    /// Little-endian bytes of all four buffers, for byte-equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        [&self.shift, &self.mask, &self.warped, &self.target_depth]
            .iter()
            .flat_map(|b| b.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

impl FlatWarpInput {
    pub fn from_frame<T: Scalar>(frame: &RgbdFrame<T>, pose: &Extrinsics<T>, k: &Intrinsics<T>) -> Self {
        let f = |v: T| v.to_f32().unwrap();
        Self {
            height: frame.height() as u32,
            width: frame.width() as u32,
            rgb: interleave(&frame.rgb),
            depth: frame.depth.data.iter().map(|&v| f(v)).collect(),
            pose: pose.to_flat().map(f),
            intrinsics: k.to_flat().map(f),
        }
    }

    /// Calls `kernel` across the C boundary.
    pub fn run(&self, kernel: WarpKernelFn) -> Result<FlatWarpOutput> {
        let (h, w) = (self.height as usize, self.width as usize);
        if self.rgb.len() != 3 * h * w || self.depth.len() != h * w {
            return Err(Error::Shape("flat buffers do not match dimensions".into()));
        }
        let mut out = FlatWarpOutput::zeros(h, w);
        // SAFETY: every buffer is sized for `h·w` pixels as documented on `WarpKernelFn`.
        let status = unsafe {
            kernel(
                self.rgb.as_ptr(),
                self.depth.as_ptr(),
                self.height,
                self.width,
                self.pose.as_ptr(),
                self.intrinsics.as_ptr(),
                out.shift.as_mut_ptr(),
                out.mask.as_mut_ptr(),
                out.warped.as_mut_ptr(),
                out.target_depth.as_mut_ptr(),
            )
        };
        match status {
            STATUS_OK => Ok(out),
            code => Err(Error::Domain(format!("warp kernel returned status {code}"))),
        }
    }
}

fn interleave<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    let n = t.h * t.w;
    let mut out = vec![0.0; n * t.c];
    for c in 0..t.c {
        for (i, &v) in t.plane(c).iter().enumerate() {
            out[i * t.c + c] = v.to_f32().unwrap();
        }
    }
    out
}

fn deinterleave(buf: &[f32], c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(c, h, w, |ch, y, x| buf[(y * w + x) * c + ch])
}

/// Reference warp over flat buffers.
pub fn forward_warp_flat(input: &FlatWarpInput) -> Result<FlatWarpOutput> {
    let (h, w) = (input.height as usize, input.width as usize);
    if h == 0 || w == 0 || input.rgb.len() != 3 * h * w || input.depth.len() != h * w {
        return Err(Error::Shape(format!("flat buffers do not match {h}x{w}")));
    }
    let [fx, fy, cx, cy, kw, kh] = input.intrinsics;
    if kw as usize != w || kh as usize != h {
        return Err(Error::Shape(format!("intrinsics for {kw}x{kh} applied to {w}x{h} buffers")));
    }
    let k = Intrinsics::new(fx, fy, cx, cy, w, h)?;
    let pose = Extrinsics::from_flat(&input.pose)?;
    let frame = RgbdFrame::new(deinterleave(&input.rgb, 3, h, w), Tensor::from_vec(1, h, w, input.depth.clone())?)?;
    let labels = forward_warp(&frame, &pose, &k)?;
    Ok(FlatWarpOutput {
        shift: interleave(&labels.shift.0),
        mask: labels.mask.0.data.clone(),
        warped: interleave(&labels.warped_rgb),
        target_depth: labels.target_depth.data.clone(),
    })
}

/// C entry point for the reference warp. Never unwinds into the caller.
///
/// # Safety
/// Pointers must be valid for the lengths documented on [`WarpKernelFn`].
#[no_mangle]
pub unsafe extern "C" fn cheapnvs_forward_warp_reference(
    rgb: *const f32,
    depth: *const f32,
    height: u32,
    width: u32,
    pose: *const f32,
    intrinsics: *const f32,
    shift: *mut f32,
    mask: *mut f32,
    warped: *mut f32,
    target_depth: *mut f32,
) -> i32 {
    if [rgb, depth, pose, intrinsics].iter().any(|p| p.is_null())
        || [shift, mask, warped, target_depth].iter().any(|p| p.is_null())
    {
        return STATUS_NULL_POINTER;
    }
    let (h, w) = (height as usize, width as usize);
    if h == 0 || w == 0 {
        return STATUS_DIMENSION_MISMATCH;
    }
    let n = h * w;
    let input = FlatWarpInput {
        height,
        width,
        rgb: std::slice::from_raw_parts(rgb, 3 * n).to_vec(),
        depth: std::slice::from_raw_parts(depth, n).to_vec(),
        pose: std::slice::from_raw_parts(pose, 12).try_into().unwrap(),
        intrinsics: std::slice::from_raw_parts(intrinsics, 6).try_into().unwrap(),
    };
    let result = std::panic::catch_unwind(|| forward_warp_flat(&input));
    let out = match result {
        Ok(Ok(out)) => out,
        Ok(Err(Error::Shape(_))) => return STATUS_DIMENSION_MISMATCH,
        Ok(Err(_)) => return STATUS_INVALID_INPUT,
        Err(_) => return STATUS_PANIC,
    };
    std::slice::from_raw_parts_mut(shift, 2 * n).copy_from_slice(&out.shift);
    std::slice::from_raw_parts_mut(mask, n).copy_from_slice(&out.mask);
    std::slice::from_raw_parts_mut(warped, 3 * n).copy_from_slice(&out.warped);
    std::slice::from_raw_parts_mut(target_depth, n).copy_from_slice(&out.target_depth);
    STATUS_OK
}
