//! Inpainting teachers: pluggable hole fillers whose output supervises the
//! inpainting decoder.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fills the holes of a masked image.
///
/// `hole` is `1×H×W` with 1 where content is missing. Implementations must
/// return an image of the same shape with values in `[0,1]` that equals
/// `masked` wherever `hole` is 0.
pub trait InpaintTeacher<T: Scalar>: Send + Sync {
    fn fill(&self, masked: &Tensor<T>, hole: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> InpaintTeacher<T> for F
where
    F: Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>> + Send + Sync,
{
    fn fill(&self, masked: &Tensor<T>, hole: &Tensor<T>) -> Result<Tensor<T>> {
        self(masked, hole)
    }
}

fn check<T: Scalar>(masked: &Tensor<T>, hole: &Tensor<T>) -> Result<()> {
    if hole.c != 1 || !masked.same_spatial(hole) {
        return Err(Error::Teacher(format!(
            "hole mask {:?} does not match image {:?}",
            hole.shape(),
            masked.shape()
        )));
    }
    Ok(())
}

#[inline]
fn is_hole<T: Scalar>(v: T) -> bool {
    v >= T::half()
}

/// Per-channel mean of the visible pixels; mid-gray when nothing is visible.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanFill;

impl<T: Scalar> InpaintTeacher<T> for MeanFill {
    fn fill(&self, masked: &Tensor<T>, hole: &Tensor<T>) -> Result<Tensor<T>> {
        check(masked, hole)?;
        let n = masked.plane_len();
        let hole = hole.plane(0);
        let visible = hole.iter().filter(|&&v| !is_hole(v)).count();
        let mut out = masked.clone();
        for c in 0..masked.c {
            let plane = masked.plane(c);
            let mean = if visible == 0 {
                T::half()
            } else {
                let s: T = (0..n).filter(|&i| !is_hole(hole[i])).map(|i| plane[i]).sum();
                s / T::from_usize(visible).unwrap()
            };
            let dst = out.plane_mut(c);
            for i in 0..n {
                if is_hole(hole[i]) {
                    dst[i] = mean;
                }
            }
        }
        Ok(out)
    }
}

/// Fixed color for every hole pixel.
#[derive(Clone, Copy, Debug)]
pub struct ConstantFill(pub [f64; 3]);

impl<T: Scalar> InpaintTeacher<T> for ConstantFill {
    fn fill(&self, masked: &Tensor<T>, hole: &Tensor<T>) -> Result<Tensor<T>> {
        check(masked, hole)?;
        let n = masked.plane_len();
        let mut out = masked.clone();
        for c in 0..masked.c {
            let v = T::from_f64c(self.0[c.min(2)].clamp(0.0, 1.0));
            for i in 0..n {
                if is_hole(hole.data[i]) {
                    out.data[c * n + i] = v;
                }
            }
        }
        Ok(out)
    }
}

/// Classical fill: holes are peeled from their boundary inwards, each pixel
/// taking the mean of its already-known 8-neighbours, then smoothed by
/// `smoothing_iters` Jacobi sweeps restricted to hole pixels.
#[derive(Clone, Copy, Debug)]
pub struct NeighborhoodFill {
    pub smoothing_iters: usize,
}

impl Default for NeighborhoodFill {
    fn default() -> Self {
        Self { smoothing_iters: 8 }
    }
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

impl<T: Scalar> InpaintTeacher<T> for NeighborhoodFill {
    fn fill(&self, masked: &Tensor<T>, hole: &Tensor<T>) -> Result<Tensor<T>> {
        check(masked, hole)?;
        let (c, h, w) = masked.shape();
        let n = h * w;
        let holes: Vec<bool> = hole.plane(0).iter().map(|&v| is_hole(v)).collect();
        if !holes.iter().any(|&b| b) {
            return Ok(masked.clone());
        }
        if holes.iter().all(|&b| b) {
            return MeanFill.fill(masked, hole);
        }
        let mut out = masked.clone();
        let mut known: Vec<bool> = holes.iter().map(|&b| !b).collect();
        let neighbors = |i: usize| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            NEIGHBORS.iter().filter_map(move |&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w)
                    .then(|| ny as usize * w + nx as usize)
            })
        };

        // onion peel; each ring reads only pixels known before the ring
        loop {
            let ring: Vec<usize> =
                (0..n).filter(|&i| !known[i] && neighbors(i).any(|j| known[j])).collect();
            if ring.is_empty() {
                break;
            }
            let mut vals = Vec::with_capacity(ring.len() * c);
            for &i in &ring {
                let src: Vec<usize> = neighbors(i).filter(|&j| known[j]).collect();
                let cnt = T::from_usize(src.len()).unwrap();
                for ch in 0..c {
                    let s: T = src.iter().map(|&j| out.data[ch * n + j]).sum();
                    vals.push(s / cnt);
                }
            }
            for (r, &i) in ring.iter().enumerate() {
                for ch in 0..c {
                    out.data[ch * n + i] = vals[r * c + ch];
                }
                known[i] = true;
            }
        }

        for _ in 0..self.smoothing_iters {
            let prev = out.clone();
            for i in (0..n).filter(|&i| holes[i]) {
                let nb: Vec<usize> = neighbors(i).collect();
                let cnt = T::from_usize(nb.len() + 1).unwrap();
                for ch in 0..c {
                    let s: T = nb.iter().map(|&j| prev.data[ch * n + j]).sum::<T>() + prev.data[ch * n + i];
                    out.data[ch * n + i] = s / cnt;
                }
            }
        }
        for v in out.data.iter_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
        Ok(out)
    }
}
