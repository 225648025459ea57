use rand::Rng;

use super::params::{Init, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense 2-D convolution (cross-correlation) via im2col + GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        zero_init: bool,
    ) -> Self {
        b.push_scope(name);
        let fan_in = cin * kernel * kernel;
        let init = if zero_init { Init::Zeros } else { Init::HeUniform { fan_in, gain } };
        let weight = b.add("weight", &[cout, cin, kernel, kernel], init);
        let bias = b.add("bias", &[cout], Init::Zeros);
        b.pop_scope();
        Self { cin, cout, kernel, stride, pad: kernel / 2, weight, bias }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_size(h, w);
        (oh * ow * self.cout * self.cin * self.kernel * self.kernel) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        self.im2col_rows(x, 0..oh, ow)
    }

    /// Patch matrix for the output rows `rows` only.
    fn im2col_rows<T: Scalar>(&self, x: &Tensor<T>, rows: std::ops::Range<usize>, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let p = rows.len() * ow;
        let mut cols = vec![T::zero(); self.cin * k * k * p];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= x.h {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let (lo, hi) = valid_cols(self.stride, self.pad, kx, ow, x.w);
                        let first = lo * self.stride + kx - self.pad;
                        let d = &mut dst[r * ow + lo..r * ow + hi];
                        if self.stride == 1 {
                            d.copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (j, v) in d.iter_mut().enumerate() {
                                *v = src[first + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Tensor<T> {
        let k = self.kernel;
        let p = oh * ow;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = dx.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let (lo, hi) = valid_cols(self.stride, self.pad, kx, ow, w);
                        let first = lo * self.stride + kx - self.pad;
                        let row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (j, &v) in src[oy * ow + lo..oy * ow + hi].iter().enumerate() {
                            let d = &mut row[first + j * self.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut y = Tensor::zeros(self.cout, oh, ow);
        let bias = self.bias.slice(params);
        for (co, b) in bias.iter().enumerate() {
            y.plane_mut(co).fill(*b);
        }
        let w = self.weight.slice(params);
        if self.is_pointwise() {
            T::gemm(self.cout, kk, p, T::one(), w, false, &x.data, false, T::one(), &mut y.data);
        } else {
            // bound the patch matrix so large frames do not need a kk×H×W buffer
            let band = (IM2COL_BUDGET / (kk * ow)).max(1);
            if band >= oh {
                let cols = self.im2col(x, oh, ow);
                T::gemm(self.cout, kk, p, T::one(), w, false, &cols, false, T::one(), &mut y.data);
            } else {
                for r0 in (0..oh).step_by(band) {
                    let rows = r0..(r0 + band).min(oh);
                    let bp = rows.len() * ow;
                    let cols = self.im2col_rows(x, rows, ow);
                    let mut tmp = vec![T::zero(); self.cout * bp];
                    for (co, b) in bias.iter().enumerate() {
                        tmp[co * bp..(co + 1) * bp].fill(*b);
                    }
                    T::gemm(self.cout, kk, bp, T::one(), w, false, &cols, false, T::one(), &mut tmp);
                    for co in 0..self.cout {
                        y.plane_mut(co)[r0 * ow..r0 * ow + bp].copy_from_slice(&tmp[co * bp..(co + 1) * bp]);
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients into `grads` and returns `dL/dx`.
    pub fn backward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let (oh, ow) = (dy.h, dy.w);
        let p = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        {
            let gb = self.bias.slice_mut(grads);
            for (co, g) in gb.iter_mut().enumerate() {
                *g = *g + dy.plane(co).iter().copied().sum::<T>();
            }
        }
        let w = self.weight.slice(params);
        if self.is_pointwise() {
            T::gemm(self.cout, p, kk, T::one(), &dy.data, false, &x.data, true, T::one(), self.weight.slice_mut(grads));
            let mut dx = Tensor::zeros(self.cin, x.h, x.w);
            T::gemm(kk, self.cout, p, T::one(), w, true, &dy.data, false, T::zero(), &mut dx.data);
            dx
        } else {
            let cols = self.im2col(x, oh, ow);
            T::gemm(self.cout, p, kk, T::one(), &dy.data, false, &cols, true, T::one(), self.weight.slice_mut(grads));
            let mut dcols = vec![T::zero(); kk * p];
            T::gemm(kk, self.cout, p, T::one(), w, true, &dy.data, false, T::zero(), &mut dcols);
            self.col2im(&dcols, x.h, x.w, oh, ow)
        }
    }
}

/// Output columns `lo..hi` whose tap `kx` lands inside an input row of width `w`.
fn valid_cols(stride: usize, pad: usize, kx: usize, ow: usize, w: usize) -> (usize, usize) {
    let lo = if kx < pad { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kx { (w + pad - kx).div_ceil(stride).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Patch-matrix elements materialised at once by the forward pass.
const IM2COL_BUDGET: usize = 1 << 20;

/// Per-channel 3×3 (or k×k) convolution, one filter per channel.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize, kernel: usize, stride: usize) -> Self {
        b.push_scope(name);
        let weight = b.add("weight", &[channels, kernel, kernel], Init::HeUniform { fan_in: kernel * kernel, gain: 1.0 });
        let bias = b.add("bias", &[channels], Init::Zeros);
        b.pop_scope();
        Self { channels, kernel, stride, pad: kernel / 2, weight, bias }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_size(h, w);
        (oh * ow * self.channels * self.kernel * self.kernel) as u64
    }

    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }

    fn valid_cols(&self, kx: usize, ow: usize, w: usize) -> (usize, usize) {
        valid_cols(self.stride, self.pad, kx, ow, w)
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.channels, "depthwise input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let (k, s) = (self.kernel, self.stride);
        let w = self.weight.slice(params);
        let bias = self.bias.slice(params);
        let cols: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_cols(kx, ow, x.w)).collect();
        let mut y = Tensor::zeros(self.channels, oh, ow);
        for c in 0..self.channels {
            let xin = x.plane(c);
            let wk = &w[c * k * k..(c + 1) * k * k];
            let out = y.plane_mut(c);
            out.fill(bias[c]);
            for oy in 0..oh {
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, x.h) else { continue };
                    let irow = &xin[iy * x.w..(iy + 1) * x.w];
                    for (kx, &(lo, hi)) in cols.iter().enumerate() {
                        let wv = wk[ky * k + kx];
                        let first = lo * s + kx - self.pad;
                        if s == 1 {
                            for (o, &v) in orow[lo..hi].iter_mut().zip(&irow[first..first + hi - lo]) {
                                *o = *o + wv * v;
                            }
                        } else {
                            for (j, o) in orow[lo..hi].iter_mut().enumerate() {
                                *o = *o + wv * irow[first + j * s];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let (oh, ow) = (dy.h, dy.w);
        let (k, s) = (self.kernel, self.stride);
        let w = self.weight.slice(params);
        let cols: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_cols(kx, ow, x.w)).collect();
        let mut dx = Tensor::zeros(self.channels, x.h, x.w);
        let mut gw = vec![T::zero(); self.channels * k * k];
        let mut gb = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let xin = x.plane(c);
            let g = dy.plane(c);
            let wk = &w[c * k * k..(c + 1) * k * k];
            let gwk = &mut gw[c * k * k..(c + 1) * k * k];
            let dxp = dx.plane_mut(c);
            gb[c] = g.iter().copied().sum();
            for oy in 0..oh {
                let grow = &g[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, x.h) else { continue };
                    let irow = &xin[iy * x.w..(iy + 1) * x.w];
                    let drow = &mut dxp[iy * x.w..(iy + 1) * x.w];
                    for (kx, &(lo, hi)) in cols.iter().enumerate() {
                        let wv = wk[ky * k + kx];
                        let first = lo * s + kx - self.pad;
                        let mut acc = T::zero();
                        for (j, &go) in grow[lo..hi].iter().enumerate() {
                            let xi = first + j * s;
                            acc = acc + go * irow[xi];
                            drow[xi] = drow[xi] + go * wv;
                        }
                        gwk[ky * k + kx] = gwk[ky * k + kx] + acc;
                    }
                }
            }
        }
        for (d, s) in self.weight.slice_mut(grads).iter_mut().zip(gw) {
            *d = *d + s;
        }
        for (d, s) in self.bias.slice_mut(grads).iter_mut().zip(gb) {
            *d = *d + s;
        }
        dx
    }
}

/// Fully connected layer on a flat vector.
#[derive(Clone, Debug)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        b.push_scope(name);
        let weight = b.add("weight", &[fan_out, fan_in], Init::HeUniform { fan_in, gain });
        let bias = b.add("bias", &[fan_out], Init::Zeros);
        b.pop_scope();
        Self { fan_in, fan_out, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.fan_in);
        let mut y = self.bias.slice(params).to_vec();
        T::gemm(self.fan_out, self.fan_in, 1, T::one(), self.weight.slice(params), false, x, false, T::one(), &mut y);
        y
    }

    pub fn backward<T: Scalar>(&self, params: &[T], x: &[T], dy: &[T], grads: &mut [T]) -> Vec<T> {
        for (g, d) in self.bias.slice_mut(grads).iter_mut().zip(dy) {
            *g = *g + *d;
        }
        T::gemm(self.fan_out, 1, self.fan_in, T::one(), dy, false, x, false, T::one(), self.weight.slice_mut(grads));
        let mut dx = vec![T::zero(); self.fan_in];
        T::gemm(self.fan_in, self.fan_out, 1, T::one(), self.weight.slice(params), true, dy, false, T::zero(), &mut dx);
        dx
    }

    pub fn macs(&self) -> u64 {
        (self.fan_in * self.fan_out) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn banded_forward_matches_single_patch_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = ParamBuilder::<f32, _>::new(&mut rng);
        let conv = Conv2d::new(&mut b, "c", 16, 3, 3, 1, 1.0, false);
        let mut params = b.finish();
        params.fill_prefix("c.bias", 0.25);
        let x = Tensor::from_fn(16, 21, 600, |c, y, x| ((c * 7 + y * 13 + x * 3) % 17) as f32 / 17.0);
        assert!(IM2COL_BUDGET / (16 * 9 * 600) < 21, "input must take the banded path");
        let y = conv.forward(&params.data, &x);
        let cols = conv.im2col(&x, 21, 600);
        let mut want = Tensor::zeros(3, 21, 600);
        for c in 0..3 {
            want.plane_mut(c).fill(0.25);
        }
        f32::gemm(3, 144, 21 * 600, 1.0, conv.weight.slice(&params.data), false, &cols, false, 1.0, &mut want.data);
        assert_eq!(y, want);
    }
}
