//! Blending the warped source with the inpainting reproduces a sequential
//! splat-then-fill pipeline, and grid sampling matches hand-computed cases.

use cheapnvs::compositor::synthesize;
use cheapnvs::eval::eval_poses;
use cheapnvs::geometry::{Intrinsics, PoseSamplerConfig};
use cheapnvs::teacher::{InpaintTeacher, MeanFill, NeighborhoodFill};
use cheapnvs::warp::{forward_warp, grid_sample, Border, OcclusionMask, RgbdFrame, ShiftMap};
use cheapnvs::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(rng: &mut ChaCha8Rng) -> RgbdFrame<f32> {
    let rgb = Tensor::from_fn(3, 16, 16, |_, _, _| rng.gen_range(0.0f32..=1.0));
    let (y0, x0) = (rng.gen_range(0..10), rng.gen_range(0..10));
    let near = rng.gen_range(0.6f32..1.0);
    let far = rng.gen_range(1.5f32..3.0);
    let depth = Tensor::from_fn(1, 16, 16, |_, y, x| if (y0..y0 + 6).contains(&y) && (x0..x0 + 6).contains(&x) { near } else { far });
    RgbdFrame::new(rgb, depth).unwrap()
}

#[test]
fn blend_equals_sequential_warp_then_fill() {
    let teachers: [&dyn InpaintTeacher<f32>; 2] = [&MeanFill, &NeighborhoodFill::default()];
    let k = Intrinsics::default_for(16, 16);
    let mut with_holes = 0;
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = random_frame(&mut rng);
        let sampler = PoseSamplerConfig { max_translation: 0.15, max_rotation_deg: 5.0, seed };
        let pose = eval_poses(std::slice::from_ref(&frame), &sampler).unwrap()[0];
        let labels = forward_warp(&frame, &pose, &k).unwrap();
        let fill = teachers[seed as usize % 2].fill(&labels.warped_rgb, &labels.mask.holes()).unwrap();

        // sequential: keep splatted colours, take the fill in holes
        let mut sequential = labels.warped_rgb.clone();
        for c in 0..3 {
            for i in 0..256 {
                if labels.mask.0.data[i] == 0.0 {
                    sequential.data[c * 256 + i] = fill.data[c * 256 + i];
                }
            }
        }
        let blended = synthesize(&frame.rgb, &labels.shift, &labels.mask, &fill, Border::Clamp).unwrap();
        let bits = |t: &Tensor<f32>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&blended), bits(&sequential), "seed {seed}");
        with_holes += usize::from(labels.mask.0.data.contains(&0.0));
    }
    assert!(with_holes >= 30, "only {with_holes} cases had holes");
}

#[test]
fn grid_sample_hand_cases() {
    let img = Tensor::from_vec(1, 1, 2, vec![0.2f64, 0.8]).unwrap();
    let zero = ShiftMap(Tensor::zeros(2, 1, 2));
    assert_eq!(grid_sample(&img, &zero, Border::Clamp).unwrap(), img);
    assert_eq!(grid_sample(&img, &zero, Border::Zeros).unwrap(), img);

    let half = ShiftMap(Tensor::from_vec(2, 1, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap());
    let out = grid_sample(&img, &half, Border::Clamp).unwrap();
    assert!((out.data[0] - 0.5).abs() < 1e-6 && (out.data[1] - 0.8).abs() < 1e-6);

    // 2x2, sample at (0.25, 0.75): weights 0.1875, 0.0625, 0.5625, 0.1875
    let sq = Tensor::from_vec(1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    let s = ShiftMap(Tensor::from_vec(2, 2, 2, vec![0.25, 0.0, 0.0, 0.0, 0.75, 0.0, 0.0, 0.0]).unwrap());
    let out = grid_sample(&sq, &s, Border::Clamp).unwrap();
    assert!((out.data[0] - (0.1875 + 2.0 * 0.0625 + 3.0 * 0.5625 + 4.0 * 0.1875)).abs() < 1e-6);

    // everything pushed past the right border of a 2x3 frame
    let img = Tensor::from_fn(1, 2, 3, |_, y, x| (y * 3 + x) as f64);
    let far = ShiftMap(Tensor::from_fn(2, 2, 3, |c, _, _| if c == 0 { 10.0 } else { 0.0 }));
    let out = grid_sample(&img, &far, Border::Clamp).unwrap();
    for y in 0..2 {
        for x in 0..3 {
            assert_eq!(out.at(0, y, x), img.at(0, y, 2));
        }
    }
    assert!(grid_sample(&img, &far, Border::Zeros).unwrap().data.iter().all(|&v| v == 0.0));

    // zeros border keeps the in-range tap of a straddling sample
    let edge = ShiftMap(Tensor::from_fn(2, 2, 3, |c, _, x| if c == 0 && x == 2 { 0.25 } else { 0.0 }));
    let out = grid_sample(&img, &edge, Border::Zeros).unwrap();
    assert!((out.at(0, 1, 2) - 0.75 * 5.0).abs() < 1e-6);
}

#[test]
fn boundary_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = Tensor::from_fn(3, 8, 8, |_, _, _| rng.gen_range(0.0f64..=1.0));
    let inp = Tensor::from_fn(3, 8, 8, |_, _, _| rng.gen_range(0.0f64..=1.0));
    let shift = ShiftMap(Tensor::from_fn(2, 8, 8, |_, _, _| rng.gen_range(-1.5..1.5)));
    let all = synthesize(&src, &shift, &OcclusionMask::ones(8, 8), &inp, Border::Clamp).unwrap();
    assert_eq!(all, grid_sample(&src, &shift, Border::Clamp).unwrap());
    let none = synthesize(&src, &shift, &OcclusionMask(Tensor::zeros(1, 8, 8)), &inp, Border::Clamp).unwrap();
    assert_eq!(none, inp);
}

proptest! {
    #[test]
    fn output_lies_between_warp_and_inpaint(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = Tensor::from_fn(3, 6, 7, |_, _, _| rng.gen_range(0.0f64..=1.0));
        let inp = Tensor::from_fn(3, 6, 7, |_, _, _| rng.gen_range(0.0f64..=1.0));
        let mask = OcclusionMask(Tensor::from_fn(1, 6, 7, |_, _, _| rng.gen_range(0.0f64..=1.0)));
        let shift = ShiftMap(Tensor::from_fn(2, 6, 7, |_, _, _| rng.gen_range(-3.0..3.0)));
        let warped = grid_sample(&src, &shift, Border::Clamp).unwrap();
        let out = synthesize(&src, &shift, &mask, &inp, Border::Clamp).unwrap();
        for (j, &v) in out.data.iter().enumerate() {
            let (a, b) = (warped.data[j], inp.data[j]);
            prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        }
    }
}
