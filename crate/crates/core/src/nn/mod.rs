//! Minimal layers with explicit forward and backward passes.
//!
//! Layers own no data: they hold [`ParamId`]s into a flat parameter buffer,
//! read weights from `&[T]` and accumulate gradients into a same-sized
//! `&mut [T]`.

mod adam;
mod conv;
pub mod ops;
mod params;

pub use adam::Adam;
pub use conv::{Conv2d, DepthwiseConv2d, Linear};
pub use params::{Init, ParamBuilder, ParamEntry, ParamId, ParamSet};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Checks every parameter and a sample of input entries of a layer
    /// against central differences of `<layer(x), g>`.
    fn check_layer(
        params: &ParamSet<f64>,
        x: &Tensor<f64>,
        fwd: &dyn Fn(&[f64], &Tensor<f64>) -> Tensor<f64>,
        bwd: &dyn Fn(&[f64], &Tensor<f64>, &Tensor<f64>, &mut [f64]) -> Tensor<f64>,
    ) {
        let y = fwd(&params.data, x);
        let g = Tensor::from_fn(y.c, y.h, y.w, |c, yy, xx| ((c * 13 + yy * 7 + xx) as f64 * 0.31).sin());
        let mut grads = params.zeros_like();
        let dx = bwd(&params.data, x, &g, &mut grads);
        let eps = 1e-6;
        for i in 0..params.len() {
            let mut p = params.data.clone();
            p[i] += eps;
            let up = dot(&fwd(&p, x), &g);
            p[i] -= 2.0 * eps;
            let dn = dot(&fwd(&p, x), &g);
            let num = (up - dn) / (2.0 * eps);
            assert!((num - grads[i]).abs() < 1e-6 * (1.0 + num.abs()), "param {i}: {num} vs {}", grads[i]);
        }
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let up = dot(&fwd(&params.data, &xp), &g);
            xp.data[i] -= 2.0 * eps;
            let dn = dot(&fwd(&params.data, &xp), &g);
            let num = (up - dn) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-6 * (1.0 + num.abs()), "input {i}: {num} vs {}", dx.data[i]);
        }
    }

    fn input(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |ch, y, x| ((ch * 29 + y * 11 + x) as f64 * 0.47).cos())
    }

    fn randomize_biases(p: &mut ParamSet<f64>) {
        for (i, v) in p.data.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = ((i as f64) * 0.77).sin() * 0.3;
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, s, cin, cout) in [(3, 1, 2, 3), (3, 2, 3, 2), (1, 1, 4, 3)] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut b = ParamBuilder::<f64, _>::new(&mut rng);
            let conv = Conv2d::new(&mut b, "c", cin, cout, k, s, 1.0, false);
            let mut params = b.finish();
            randomize_biases(&mut params);
            let x = input(cin, 6, 5);
            check_layer(&params, &x, &|p, x| conv.forward(p, x), &|p, x, g, gr| conv.backward(p, x, g, gr));
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = ParamBuilder::<f64, _>::new(&mut rng);
        let conv = Conv2d::new(&mut b, "c", 2, 2, 3, 2, 1.0, false);
        let params = b.finish();
        let x = input(2, 5, 6);
        let y = conv.forward(&params.data, &x);
        assert_eq!(y.shape(), (2, 3, 3));
        let w = conv.weight.slice(&params.data);
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && iy < 5 && ix < 6 {
                                    acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx] * x.at(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert!((acc - y.at(co, oy, ox)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_gradients() {
        for s in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut b = ParamBuilder::<f64, _>::new(&mut rng);
            let dw = DepthwiseConv2d::new(&mut b, "d", 3, 3, s);
            let mut params = b.finish();
            randomize_biases(&mut params);
            let x = input(3, 6, 7);
            check_layer(&params, &x, &|p, x| dw.forward(p, x), &|p, x, g, gr| dw.backward(p, x, g, gr));
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = ParamBuilder::<f64, _>::new(&mut rng);
        let lin = Linear::new(&mut b, "l", 5, 4, 1.0);
        let mut params = b.finish();
        randomize_biases(&mut params);
        let x = input(5, 1, 1);
        let as_t = |v: Vec<f64>| Tensor::from_vec(v.len(), 1, 1, v).unwrap();
        check_layer(
            &params,
            &x,
            &|p, x| as_t(lin.forward(p, &x.data)),
            &|p, x, g, gr| as_t(lin.backward(p, &x.data, &g.data, gr)),
        );
    }

    #[test]
    fn named_parameters_are_scoped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = ParamBuilder::<f32, _>::new(&mut rng);
        b.push_scope("flow");
        let conv = Conv2d::new(&mut b, "head", 2, 2, 3, 1, 1.0, true);
        b.pop_scope();
        let p = b.finish();
        assert_eq!(p.entries[0].name, "flow.head.weight");
        assert_eq!(p.entries[1].name, "flow.head.bias");
        assert!(conv.weight.slice(&p.data).iter().all(|&v| v == 0.0));
        assert_eq!(p.indices_with_prefix("flow.").len(), p.len());
    }
}
