//! Planar channel-major (`C×H×W`) dense tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A single-sample feature map stored channel-major: element `(c, y, x)`
/// lives at `data[(c * h + y) * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::filled(c, h, w, T::zero())
    }

    pub fn filled(c: usize, h: usize, w: usize, v: T) -> Self {
        Self { c, h, w, data: vec![v; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot hold {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self { c, h, w, data }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_spatial(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.same_spatial(other)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn ensure_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Stacks channels of `parts` in order; all parts share one spatial size.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut c = 0;
        for p in parts {
            if p.h != h || p.w != w {
                return Err(Error::Shape(format!(
                    "concat of {}x{} with {}x{}",
                    h, w, p.h, p.w
                )));
            }
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Ok(Self { c, h, w, data })
    }

    /// Splits channels back into chunks of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.c);
        let n = self.plane_len();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(Self {
                c: s,
                h: self.h,
                w: self.w,
                data: self.data[start * n..(start + s) * n].to_vec(),
            });
            start += s;
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64c(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Horizontal mirror.
    pub fn flip_x(&self) -> Self {
        Self::from_fn(self.c, self.h, self.w, |c, y, x| self.at(c, y, self.w - 1 - x))
    }

    /// Copies the window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.h && x0 + w <= self.w);
        Self::from_fn(self.c, h, w, |c, y, x| self.at(c, y0 + y, x0 + x))
    }

    /// Grows the image by repeating its border rows and columns.
    pub fn pad_edge(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self::from_fn(self.c, self.h + top + bottom, self.w + left + right, |c, y, x| {
            self.at(c, y.saturating_sub(top).min(self.h - 1), x.saturating_sub(left).min(self.w - 1))
        })
    }
}
