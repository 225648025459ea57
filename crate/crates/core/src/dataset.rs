//! Loading image+depth samples from disk and generating synthetic scenes.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Extrinsics;
use crate::io;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::RgbdFrame;

/// One sample on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub depth: PathBuf,
    /// Frozen evaluation pose.
    pub pose: Option<PathBuf>,
}

impl SampleRecord {
    pub fn stem(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Replaces non-positive or non-finite depth with the 1st percentile of the
/// positive values.
pub fn sanitize_depth<T: Scalar>(depth: &mut Tensor<T>) -> Result<()> {
    let mut pos: Vec<T> = depth.data.iter().copied().filter(|v| *v > T::zero() && v.is_finite()).collect();
    if pos.is_empty() {
        return Err(Error::Domain("depth map has no positive values".into()));
    }
    if pos.len() == depth.data.len() {
        return Ok(());
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let floor = pos[(pos.len() - 1) / 100];
    for v in depth.data.iter_mut() {
        if !(*v > T::zero() && v.is_finite()) {
            *v = floor;
        }
    }
    Ok(())
}

pub fn load_sample<T: Scalar>(rec: &SampleRecord) -> Result<RgbdFrame<T>> {
    let rgb = io::read_rgb::<T>(&rec.image)?;
    let mut depth = io::read_depth::<T>(&rec.depth)?;
    if !rgb.same_spatial(&depth) {
        return Err(Error::ResolutionMismatch { rgb: (rgb.h, rgb.w), depth: (depth.h, depth.w) });
    }
    sanitize_depth(&mut depth).map_err(|e| Error::format(&rec.depth, e.to_string()))?;
    RgbdFrame::new(rgb, depth)
}

pub fn load_pose<T: Scalar>(rec: &SampleRecord) -> Result<Option<Extrinsics<T>>> {
    rec.pose.as_deref().map(io::read_pose).transpose()
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Lists `{root}/rgb/*.{png,jpg,jpeg}` with their `{root}/depth/<stem>.{nvsd,png}`
/// and optional `{root}/pose/<stem>.txt`, sorted by file name.
pub fn scan_dir(root: &Path) -> Result<Vec<SampleRecord>> {
    let rgb_dir = root.join("rgb");
    let depth_dir = root.join("depth");
    let pose_dir = root.join("pose");
    let mut out = Vec::new();
    for image in sorted_files(&rgb_dir)? {
        let ext = image.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            continue;
        }
        let stem = image.file_stem().unwrap().to_string_lossy().into_owned();
        let depth = ["nvsd", "png"]
            .iter()
            .map(|e| depth_dir.join(format!("{stem}.{e}")))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::io(
                    depth_dir.join(format!("{stem}.nvsd")),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no depth map for image"),
                )
            })?;
        let pose = Some(pose_dir.join(format!("{stem}.txt"))).filter(|p| p.is_file());
        out.push(SampleRecord { image, depth, pose });
    }
    Ok(out)
}

pub fn load_dir<T: Scalar>(root: &Path) -> Result<Vec<RgbdFrame<T>>> {
    scan_dir(root)?.iter().map(load_sample).collect()
}

/// Depth layout of a synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SceneKind {
    /// Constant depth 1.
    Plane,
    /// Rectangle at depth 1 in front of a background at depth 2.
    Step,
    /// Linear ramp from 1 to 2 across the image.
    Gradient,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::Plane, SceneKind::Step, SceneKind::Gradient];
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Self::Plane),
            "step" => Ok(Self::Step),
            "gradient" => Ok(Self::Gradient),
            other => Err(Error::Config(format!("unknown scene kind {other:?}"))),
        }
    }
}

/// Smooth random colour field: per channel, an offset plus three low-frequency
/// sinusoids, kept inside [0.05, 0.95].
fn texture<T: Scalar>(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut waves = [[(0.0f64, 0.0f64, 0.0f64, 0.0f64); 3]; 3];
    let mut base = [0.0f64; 3];
    for c in 0..3 {
        base[c] = rng.gen_range(0.3..0.7);
        for wave in waves[c].iter_mut() {
            let fx = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / w as f64;
            let fy = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / h as f64;
            *wave = (fx, fy, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.05..0.12));
        }
    }
    Tensor::from_fn(3, h, w, |c, y, x| {
        let v = waves[c].iter().fold(base[c], |acc, &(fx, fy, ph, amp)| acc + amp * (fx * x as f64 + fy * y as f64 + ph).sin());
        T::from_f64c(v.clamp(0.05, 0.95))
    })
}

/// Deterministic textured scene with the requested depth layout.
pub fn synth_scene<T: Scalar>(kind: SceneKind, h: usize, w: usize, seed: u64) -> Result<RgbdFrame<T>> {
    if h < 4 || w < 4 {
        return Err(Error::Shape(format!("synthetic scenes need at least 4x4, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rgb = texture::<T>(h, w, &mut rng);
    let depth = match kind {
        SceneKind::Plane => Tensor::filled(1, h, w, T::one()),
        SceneKind::Gradient => {
            let along_x = rng.gen_bool(0.5);
            Tensor::from_fn(1, h, w, |_, y, x| {
                let t = if along_x { x as f64 / (w - 1) as f64 } else { y as f64 / (h - 1) as f64 };
                T::from_f64c(1.0 + t)
            })
        }
        SceneKind::Step => {
            let (bh, bw) = (rng.gen_range(h / 4..=h / 2), rng.gen_range(w / 4..=w / 2));
            let (y0, x0) = (rng.gen_range(1..h - bh), rng.gen_range(1..w - bw));
            let fg = texture::<T>(h, w, &mut rng);
            let inside = |y: usize, x: usize| y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw;
            for c in 0..3 {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        rgb.set(c, y, x, fg.at(c, y, x));
                    }
                }
            }
            Tensor::from_fn(1, h, w, |_, y, x| if inside(y, x) { T::one() } else { T::two() })
        }
    };
    RgbdFrame::new(rgb, depth)
}

/// `n` scenes cycling through step, gradient and plane layouts.
pub fn synth_dataset<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<RgbdFrame<T>>> {
    let order = [SceneKind::Step, SceneKind::Gradient, SceneKind::Plane];
    (0..n).map(|i| synth_scene(order[i % 3], h, w, seed.wrapping_mul(1000).wrapping_add(i as u64))).collect()
}

/// Writes frames in the `{root}/rgb`, `{root}/depth` layout.
pub fn write_dir<T: Scalar>(root: &Path, frames: &[(String, RgbdFrame<T>)]) -> Result<Vec<SampleRecord>> {
    let (rgb_dir, depth_dir) = (root.join("rgb"), root.join("depth"));
    for d in [&rgb_dir, &depth_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    frames
        .iter()
        .map(|(stem, f)| {
            let rec = SampleRecord { image: rgb_dir.join(format!("{stem}.png")), depth: depth_dir.join(format!("{stem}.nvsd")), pose: None };
            io::write_rgb_png(&f.rgb, &rec.image)?;
            io::write_depth_nvsd(&f.depth, &rec.depth)?;
            Ok(rec)
        })
        .collect()
}
