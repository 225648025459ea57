//! File formats: 8-bit images, depth (raw `NVSD` or 16-bit PNG with a
//! `.scale` sidecar), raw shift maps (`NVSS`) and pose text files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::Extrinsics;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEPTH_MAGIC: &[u8; 4] = b"NVSD";
pub const SHIFT_MAGIC: &[u8; 4] = b"NVSS";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

fn f32_payload<T: Scalar>(b: &[u8]) -> Vec<T> {
    b.chunks_exact(4).map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap()).collect()
}

fn push_f32<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    for v in data {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
}

/// 8-bit RGB (PNG or JPEG) as a 3×H×W tensor in [0,1].
pub fn read_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        source => Error::Image { path: path.to_path_buf(), source },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let scale = T::from_f64c(1.0 / 255.0);
    Ok(Tensor::from_fn(3, h, w, |c, y, x| T::from_u8(rgb.get_pixel(x as u32, y as u32)[c]).unwrap() * scale))
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_image<P, C>(img: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}

/// Writes a 3-channel image as 8-bit PNG; values are clamped to [0,1].
pub fn write_rgb_png<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    if img.c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", img.c)));
    }
    let buf = ImageBuffer::from_fn(img.w as u32, img.h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([quantize(img.at(0, y, x)), quantize(img.at(1, y, x)), quantize(img.at(2, y, x))])
    });
    save_image(buf, path)
}

/// Writes channel 0 as 8-bit grayscale, mapping [0,1] to [0,255].
pub fn write_gray_png<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let buf = ImageBuffer::from_fn(img.w as u32, img.h as u32, |x, y| Luma([quantize(img.at(0, y as usize, x as usize))]));
    save_image(buf, path)
}

pub fn write_depth_nvsd<T: Scalar>(depth: &Tensor<T>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(12 + depth.data.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.h as u32).to_le_bytes());
    out.extend_from_slice(&(depth.w as u32).to_le_bytes());
    push_f32(&mut out, depth.plane(0));
    write_bytes(path, &out)
}

pub fn read_depth_nvsd<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let b = read_bytes(path)?;
    if b.len() < 12 || &b[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "missing NVSD header"));
    }
    let (h, w) = (u32_at(&b, 4) as usize, u32_at(&b, 8) as usize);
    if b.len() != 12 + h * w * 4 {
        return Err(Error::format(path, format!("payload does not match {h}x{w}")));
    }
    Tensor::from_vec(1, h, w, f32_payload(&b[12..]))
}

/// Sidecar holding the metres-per-unit scale of a 16-bit depth PNG.
pub fn scale_sidecar(png: &Path) -> PathBuf {
    png.with_extension("scale")
}

/// Writes `round(depth / scale)` as 16-bit grayscale plus the scale sidecar.
pub fn write_depth_png16<T: Scalar>(depth: &Tensor<T>, scale: f64, path: &Path) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("depth scale must be positive, got {scale}")));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(depth.w as u32, depth.h as u32, |x, y| {
        Luma([(depth.at(0, y as usize, x as usize).as_f64() / scale).round().clamp(0.0, 65535.0) as u16])
    });
    save_image(buf, path)?;
    write_bytes(&scale_sidecar(path), format!("{scale}\n").as_bytes())
}

pub fn read_depth_png16<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let sidecar = scale_sidecar(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let scale: f64 = text.trim().parse().map_err(|_| Error::format(&sidecar, format!("bad scale {:?}", text.trim())))?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::format(&sidecar, format!("scale must be positive, got {scale}")));
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        source => Error::Image { path: path.to_path_buf(), source },
    })?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Tensor::from_fn(1, h, w, |_, y, x| T::from_f64c(g.get_pixel(x as u32, y as u32)[0] as f64 * scale)))
}

/// Depth from `.nvsd` or `.png` (with sidecar), chosen by extension.
pub fn read_depth<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("nvsd") => read_depth_nvsd(path),
        Some("png") => read_depth_png16(path),
        _ => Err(Error::format(path, "depth must be .nvsd or .png")),
    }
}

/// Planar float32 tensor with header `NVSS, H, W, C`.
pub fn write_shift_nvss<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + t.data.len() * 4);
    out.extend_from_slice(SHIFT_MAGIC);
    for v in [t.h, t.w, t.c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    push_f32(&mut out, &t.data);
    write_bytes(path, &out)
}

pub fn read_shift_nvss<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let b = read_bytes(path)?;
    if b.len() < 16 || &b[..4] != SHIFT_MAGIC {
        return Err(Error::format(path, "missing NVSS header"));
    }
    let (h, w, c) = (u32_at(&b, 4) as usize, u32_at(&b, 8) as usize, u32_at(&b, 12) as usize);
    if b.len() != 16 + h * w * c * 4 {
        return Err(Error::format(path, format!("payload does not match {c}x{h}x{w}")));
    }
    Tensor::from_vec(c, h, w, f32_payload(&b[16..]))
}

/// Twelve whitespace-separated numbers, row-major `[R|t]`.
pub fn read_pose<T: Scalar>(path: &Path) -> Result<Extrinsics<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}"))))
        .collect::<Result<_>>()?;
    if vals.len() != 12 {
        return Err(Error::format(path, format!("expected 12 numbers, found {}", vals.len())));
    }
    let v: Vec<T> = vals.into_iter().map(T::from_f64c).collect();
    Extrinsics::from_flat(&v)
}

pub fn write_pose<T: Scalar>(pose: &Extrinsics<T>, path: &Path) -> Result<()> {
    let f = pose.to_flat();
    let mut s = String::new();
    for row in f.chunks(4) {
        let line: Vec<String> = row.iter().map(|v| format!("{:.9}", v.as_f64())).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

/// Colour coding of a 2-channel shift map: hue is the direction, saturation
/// the magnitude relative to the largest one (or 1 px, whichever is larger).
pub fn shift_to_rgb<T: Scalar>(shift: &Tensor<T>) -> Result<Tensor<T>> {
    if shift.c != 2 {
        return Err(Error::Shape(format!("shift map needs 2 channels, got {}", shift.c)));
    }
    let n = shift.plane_len();
    let (dx, dy) = (shift.plane(0), shift.plane(1));
    let mag = |i: usize| dx[i].as_f64().hypot(dy[i].as_f64());
    let max = (0..n).map(mag).fold(1.0, f64::max);
    let mut out = Tensor::zeros(3, shift.h, shift.w);
    for i in 0..n {
        let hue = (dy[i].as_f64().atan2(dx[i].as_f64()) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
        let sat = mag(i) / max;
        let k = |offset: f64| {
            let h = (hue + offset) % 6.0;
            1.0 - sat * (h.min(4.0 - h).clamp(0.0, 1.0))
        };
        for (c, off) in [5.0, 3.0, 1.0].into_iter().enumerate() {
            out.data[c * n + i] = T::from_f64c(k(off));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nvsd_and_nvss_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let d = Tensor::from_fn(1, 3, 5, |_, y, x| 0.5 + (y * 5 + x) as f32 * 0.123);
        let p = dir.path().join("d.nvsd");
        write_depth_nvsd(&d, &p).unwrap();
        assert_eq!(read_depth::<f32>(&p).unwrap(), d);
        let s = Tensor::from_fn(2, 4, 3, |c, y, x| (c as f32 - 0.5) * (y * 3 + x) as f32);
        let q = dir.path().join("s.nvss");
        write_shift_nvss(&s, &q).unwrap();
        assert_eq!(fs::read(&q).unwrap().len(), 16 + 24 * 4);
        assert_eq!(read_shift_nvss::<f32>(&q).unwrap(), s);
    }

    #[test]
    fn png16_depth_applies_scale() {
        let dir = tempfile::tempdir().unwrap();
        let d = Tensor::from_fn(1, 4, 4, |_, y, x| 0.5 + (y * 4 + x) as f64 * 0.01);
        let p = dir.path().join("d.png");
        write_depth_png16(&d, 0.001, &p).unwrap();
        let back = read_depth::<f64>(&p).unwrap();
        assert!(back.max_abs_diff(&d) <= 0.0005 + 1e-12);
        assert_eq!(back.at(0, 0, 1), 510.0 * 0.001);
    }

    #[test]
    fn rgb_roundtrip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(3, 5, 6, |c, y, x| ((c * 30 + y * 6 + x) as f64 / 90.0).min(1.0));
        let p = dir.path().join("i.png");
        write_rgb_png(&img, &p).unwrap();
        assert!(read_rgb::<f64>(&p).unwrap().max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn pose_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let pose = Extrinsics::<f64>::from_euler(0.01, 0.02, -0.03, [0.1, -0.2, 0.05]);
        let p = dir.path().join("p.txt");
        write_pose(&pose, &p).unwrap();
        let back = read_pose::<f64>(&p).unwrap();
        assert!(back.to_flat().iter().zip(pose.to_flat()).all(|(a, b)| (a - b).abs() < 1e-8));
        fs::write(&p, "1 0 0 0 0 1 0 0").unwrap();
        assert!(matches!(read_pose::<f64>(&p), Err(Error::Format { .. })));
        assert!(read_pose::<f64>(&dir.path().join("missing.txt")).unwrap_err().is_io());
    }

    #[test]
    fn truncated_headers_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nvsd");
        fs::write(&p, b"NVSD\x02\x00\x00\x00\x02\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_depth_nvsd::<f32>(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn shift_colours() {
        let shift = Tensor::<f32>::from_vec(2, 1, 3, vec![0.0, 2.0, 0.0, 0.0, 0.0, -2.0]).unwrap();
        let rgb = shift_to_rgb(&shift).unwrap();
        let px = |x: usize| [rgb.at(0, 0, x), rgb.at(1, 0, x), rgb.at(2, 0, x)];
        assert_eq!(px(0), [1.0, 1.0, 1.0]);
        // +x is red, -y (up) is violet-blue
        assert_eq!(px(1), [1.0, 0.0, 0.0]);
        let up = px(2);
        assert!(up[2] > 0.99 && up[1] < 0.01 && (up[0] - 0.5).abs() < 1e-6);
    }
}
