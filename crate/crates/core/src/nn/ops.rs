//! Parameter-free elementwise and resampling ops with their adjoints.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64c(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

/// Uses the pre-activation `x`.
pub fn relu6_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64c(6.0);
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        if !(v > T::zero() && v < six) {
            *d = T::zero();
        }
    }
    dx
}

pub fn relu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub fn relu_vec_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect()
}

/// ELU with α = 1.
pub fn elu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v.exp_m1() })
}

/// Uses the output `y`: `dy/dx = 1` for positive inputs, `y + 1` otherwise.
pub fn elu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if !(v > T::zero()) {
            *d = *d * (v + T::one());
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(v))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Bilinear ×2 upsampling with half-pixel centers and edge clamping.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let ys = axis_taps::<T>(x.h, oh);
    let xs = axis_taps::<T>(x.w, ow);
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = y.plane_mut(c);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = src[y0 * x.w + x0] * (T::one() - lx) + src[y0 * x.w + x1] * lx;
                let bot = src[y1 * x.w + x0] * (T::one() - lx) + src[y1 * x.w + x1] * lx;
                dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let ys = axis_taps::<T>(h, dy.h);
    let xs = axis_taps::<T>(w, dy.w);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let g = dy.plane(c);
        let dst = dx.plane_mut(c);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let v = g[oy * dy.w + ox];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - lx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * lx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - lx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * lx;
            }
        }
    }
    dx
}

fn axis_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::from_f64c(s - i0 as f64))
        })
        .collect()
}
