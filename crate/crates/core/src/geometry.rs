//! Pinhole camera model, rigid transforms and narrow-baseline pose sampling.
//!
//! Conventions: pixel `(x, y)` addresses column `x`, row `y`; camera space
//! is x right, y down, z forward. An [`Extrinsics`] maps source-camera
//! coordinates to target-camera coordinates (`p' = R·p + t`), so moving the
//! camera by `c` corresponds to `t = -R·c`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Vec2<T> = [T; 2];
pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

const ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// `fx = fy = max(W, H)` with the principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = T::from_usize(width.max(height)).unwrap();
        Self {
            fx: f,
            fy: f,
            cx: T::from_f64c((width as f64 - 1.0) / 2.0),
            cy: T::from_f64c((height as f64 - 1.0) / 2.0),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (T::from_usize(self.width).unwrap(), T::from_usize(self.height).unwrap());
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::Domain(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(Error::Domain(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Flat `[fx, fy, cx, cy, W, H]`.
    pub fn to_flat(&self) -> [T; 6] {
        [
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            T::from_usize(self.width).unwrap(),
            T::from_usize(self.height).unwrap(),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::from_f64c(self.fx.as_f64()),
            fy: U::from_f64c(self.fy.as_f64()),
            cx: U::from_f64c(self.cx.as_f64()),
            cy: U::from_f64c(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Relative rigid transform `[R | t]` from the source to the target camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics<T> {
    pub r: Mat3<T>,
    pub t: Vec3<T>,
}

impl<T: Scalar> Extrinsics<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { r: [[o, z, z], [z, o, z], [z, z, o]], t: [z, z, z] }
    }

    pub fn new(r: Mat3<T>, t: Vec3<T>) -> Result<Self> {
        let e = Self { r, t };
        e.validate()?;
        Ok(e)
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self { t, ..Self::identity() }
    }

    /// Transform for a camera displaced by `c` (no rotation): `t = -c`.
    pub fn camera_motion(c: Vec3<T>) -> Self {
        Self::from_translation([-c[0], -c[1], -c[2]])
    }

    /// Rotation `Rz(roll)·Ry(yaw)·Rx(pitch)`, angles in radians.
    pub fn from_euler(pitch: T, yaw: T, roll: T, t: Vec3<T>) -> Self {
        let (sx, cx) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let (sz, cz) = roll.sin_cos();
        let (o, z) = (T::one(), T::zero());
        let rx = [[o, z, z], [z, cx, -sx], [z, sx, cx]];
        let ry = [[cy, z, sy], [z, o, z], [-sy, z, cy]];
        let rz = [[cz, -sz, z], [sz, cz, z], [z, z, o]];
        Self { r: mat_mul(&rz, &mat_mul(&ry, &rx)), t }
    }

    /// Row-major `[R | t]` as 12 numbers.
    pub fn to_flat(&self) -> [T; 12] {
        let r = &self.r;
        let t = &self.t;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn from_flat(v: &[T]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Shape(format!("extrinsics need 12 values, got {}", v.len())));
        }
        Self::new(
            [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
            [v[3], v[7], v[11]],
        )
    }

    /// Checks `RᵀR = I` and `det R = 1` within 1e-6.
    pub fn validate(&self) -> Result<()> {
        if self.r.iter().flatten().chain(&self.t).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite extrinsics".into()));
        }
        let err = self.orthonormality_error();
        if err > ORTHO_TOL {
            return Err(Error::Domain(format!("rotation not orthonormal (error {err:e})")));
        }
        let det = det3(&self.r).as_f64();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Domain(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    /// Largest entry of `|RᵀR − I|`, evaluated in f64.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.r.map(|row| row.map(|v| v.as_f64()));
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.r[0][0].as_f64() + self.r[1][1].as_f64() + self.r[2][2].as_f64();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Inverse of [`Extrinsics::from_euler`]'s composition, `(pitch, yaw, roll)`.
    pub fn euler_angles(&self) -> (f64, f64, f64) {
        let r = self.r.map(|row| row.map(|v| v.as_f64()));
        let yaw = (-r[2][0]).clamp(-1.0, 1.0).asin();
        let pitch = r[2][1].atan2(r[2][2]);
        let roll = r[1][0].atan2(r[0][0]);
        (pitch, yaw, roll)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn cast<U: Scalar>(&self) -> Extrinsics<U> {
        Extrinsics {
            r: self.r.map(|row| row.map(|v| U::from_f64c(v.as_f64()))),
            t: self.t.map(|v| U::from_f64c(v.as_f64())),
        }
    }
}

fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn det3<T: Scalar>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Back-projects pixel `px` at `depth` to camera space.
///
/// Evaluated as `((x - cx) * d) / fx`; the forward warp depends on this
/// exact operation order.
#[inline]
pub fn unproject<T: Scalar>(px: Vec2<T>, depth: T, k: &Intrinsics<T>) -> Result<Vec3<T>> {
    if !(depth > T::zero()) || !depth.is_finite() {
        return Err(Error::Domain(format!("depth must be positive and finite, got {depth}")));
    }
    Ok([(px[0] - k.cx) * depth / k.fx, (px[1] - k.cy) * depth / k.fy, depth])
}

/// Projects a camera-space point to `(pixel, depth)`.
#[inline]
pub fn project<T: Scalar>(p: Vec3<T>, k: &Intrinsics<T>) -> Result<(Vec2<T>, T)> {
    if !(p[2] > T::zero()) {
        return Err(Error::BehindCamera(p[2].as_f64()));
    }
    Ok(([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy], p[2]))
}

/// `R·p + t`, each row summed left to right.
#[inline]
pub fn transform_point<T: Scalar>(p: Vec3<T>, e: &Extrinsics<T>) -> Vec3<T> {
    let r = &e.r;
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + e.t[0],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + e.t[1],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + e.t[2],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSamplerConfig {
    /// Per-axis translation bound as a fraction of the median scene depth.
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub seed: u64,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        Self { max_translation: 0.05, max_rotation_deg: 2.0, seed: 0 }
    }
}

impl PoseSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation >= 0.0 && self.max_rotation_deg >= 0.0) {
            return Err(Error::Config("pose sampler bounds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws one pose from `cfg`'s own seed.
pub fn sample_pose<T: Scalar>(cfg: &PoseSamplerConfig, median_depth: T) -> Result<Extrinsics<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_pose_with(cfg, median_depth, &mut rng)
}

/// Draws a narrow-baseline pose from a caller-owned generator.
///
/// Translation is uniform in `[±m·D]³` with the z range halved, where `m` is
/// `max_translation` and `D` the median depth. Euler angles are uniform in
/// `[±max_rotation_deg]`, redrawn until the composed rotation angle is also
/// within the bound.
pub fn sample_pose_with<T: Scalar, R: Rng + ?Sized>(
    cfg: &PoseSamplerConfig,
    median_depth: T,
    rng: &mut R,
) -> Result<Extrinsics<T>> {
    cfg.validate()?;
    let depth = median_depth.as_f64();
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::Domain(format!("median depth must be positive, got {depth}")));
    }
    let bound = cfg.max_translation * depth;
    let mut uniform = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let t = [uniform(bound), uniform(bound), uniform(bound * 0.5)];

    let max_rot = cfg.max_rotation_deg.to_radians();
    let r = if max_rot > 0.0 {
        loop {
            let (p, y, r) = (uniform(max_rot), uniform(max_rot), uniform(max_rot));
            let cand = Extrinsics::<f64>::from_euler(p, y, r, [0.0; 3]);
            if cand.rotation_angle() <= max_rot {
                break cand.r;
            }
        }
    } else {
        Extrinsics::<f64>::identity().r
    };
    let out = Extrinsics::<f64> { r, t }.cast::<T>();
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> Intrinsics<f64> {
        Intrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 101, height: 101 }
    }

    #[test]
    fn unproject_principal_point_is_optical_axis() {
        let k = Intrinsics::<f64>::default_for(64, 48);
        assert_eq!(unproject([k.cx, k.cy], 2.0, &k).unwrap(), [0.0, 0.0, 2.0]);
    }

    #[test]
    fn unproject_unit_slope_ray() {
        let k = Intrinsics::<f64>::default_for(64, 48);
        let p = unproject([k.cx + k.fx, k.cy], 1.0, &k).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] == 1.0);
    }

    #[test]
    fn unproject_hand_checked_values() {
        // (10-50)*3/100 = -1.2, (20-50)*3/100 = -0.9
        let p = unproject([10.0, 20.0], 3.0, &k100()).unwrap();
        assert!((p[0] + 1.2).abs() < 1e-12);
        assert!((p[1] + 0.9).abs() < 1e-12);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn unproject_rejects_nonpositive_depth() {
        assert!(matches!(unproject([1.0, 1.0], 0.0, &k100()), Err(Error::Domain(_))));
        assert!(matches!(unproject([1.0, 1.0], -1.0, &k100()), Err(Error::Domain(_))));
    }

    #[test]
    fn project_examples() {
        let k = k100();
        let (px, d) = project([0.0, 0.0, 2.0], &k).unwrap();
        assert_eq!((px, d), ([50.0, 50.0], 2.0));
        let (px, d) = project([-1.2, -0.9, 3.0], &k).unwrap();
        assert!((px[0] - 10.0).abs() < 1e-9 && (px[1] - 20.0).abs() < 1e-9);
        assert_eq!(d, 3.0);
        assert!(matches!(project([0.0, 0.0, 0.0], &k), Err(Error::BehindCamera(_))));
        assert!(matches!(project([0.0, 0.0, -1.0], &k), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn transform_examples() {
        let id = Extrinsics::<f64>::identity();
        assert_eq!(transform_point([1.0, -2.0, 3.0], &id), [1.0, -2.0, 3.0]);
        let tr = Extrinsics::from_translation([0.1, 0.0, 0.0]);
        assert_eq!(transform_point([0.0, 0.0, 1.0], &tr), [0.1, 0.0, 1.0]);
        let yaw = Extrinsics::<f64>::from_euler(0.0, std::f64::consts::FRAC_PI_2, 0.0, [0.0; 3]);
        let p = transform_point([0.0, 0.0, 1.0], &yaw);
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1].abs() < 1e-6 && p[2].abs() < 1e-6);
    }

    #[test]
    fn flat_roundtrip_is_row_major() {
        let e = Extrinsics::<f64>::from_euler(0.01, -0.02, 0.03, [0.1, 0.2, 0.3]);
        let flat = e.to_flat();
        assert_eq!(flat[3], 0.1);
        assert_eq!(flat[7], 0.2);
        assert_eq!(flat[11], 0.3);
        assert_eq!(Extrinsics::from_flat(&flat).unwrap(), e);
    }

    #[test]
    fn from_flat_rejects_non_rotation() {
        let mut flat = Extrinsics::<f64>::identity().to_flat();
        flat[0] = 2.0;
        assert!(Extrinsics::from_flat(&flat).is_err());
        let mut flat = Extrinsics::<f64>::identity().to_flat();
        flat[0] = -1.0; // reflection: orthonormal but det = -1
        assert!(Extrinsics::from_flat(&flat).is_err());
    }

    #[test]
    fn euler_roundtrip() {
        let e = Extrinsics::<f64>::from_euler(0.02, -0.03, 0.01, [0.0; 3]);
        let (p, y, r) = e.euler_angles();
        assert!((p - 0.02).abs() < 1e-12 && (y + 0.03).abs() < 1e-12 && (r - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_bounds_give_identity() {
        let cfg = PoseSamplerConfig { max_translation: 0.0, max_rotation_deg: 0.0, seed: 3 };
        assert!(sample_pose::<f64>(&cfg, 1.0).unwrap().is_identity());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = PoseSamplerConfig { seed: 11, ..Default::default() };
        assert_eq!(sample_pose::<f32>(&cfg, 2.5).unwrap(), sample_pose::<f32>(&cfg, 2.5).unwrap());
    }

    #[test]
    fn sampler_rejects_bad_inputs() {
        assert!(sample_pose::<f64>(&PoseSamplerConfig::default(), 0.0).is_err());
        let cfg = PoseSamplerConfig { max_translation: -1.0, ..Default::default() };
        assert!(sample_pose::<f64>(&cfg, 1.0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        let k = Intrinsics::<f64>::default_for(16, 8);
        assert_eq!((k.fx, k.cx, k.cy), (16.0, 7.5, 3.5));
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }
}
