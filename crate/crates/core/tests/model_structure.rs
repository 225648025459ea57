//! Sharing and independence contracts of the three-decoder network.

use cheapnvs::dataset::{synth_scene, SceneKind};
use cheapnvs::geometry::Extrinsics;
use cheapnvs::model::{Head, Model, ModelConfig, SkipTargets};
use cheapnvs::warp::RgbdFrame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(skips: SkipTargets) -> Model<f32> {
    Model::new(ModelConfig { base_channels: 4, encoder_stages: 3, extrinsics_hidden: 8, extrinsics_out: 8, skip_targets: skips, seed: 2, ..Default::default() })
        .unwrap()
}

fn frame() -> RgbdFrame<f32> {
    synth_scene(SceneKind::Step, 32, 32, 4).unwrap()
}

fn pose() -> Extrinsics<f32> {
    Extrinsics::from_euler(0.01, -0.02, 0.005, [0.03, -0.01, 0.02])
}

/// Gives the zero-initialised heads non-trivial weights so that changes upstream are visible.
fn randomize(m: &mut Model<f32>, prefix: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in m.params.indices_with_prefix(prefix) {
        m.params.data[i] = rng.gen_range(-0.3..0.3);
    }
}

#[test]
fn perturbing_one_decoder_leaves_the_others_bit_identical() {
    for skips in [SkipTargets::NONE, SkipTargets::MASK_AND_INPAINT, SkipTargets::ALL] {
        let mut m = small(skips);
        let (f, p) = (frame(), pose());
        let base = m.forward(&f, &p).unwrap();
        for (k, head) in Head::ALL.into_iter().enumerate() {
            let mut q = small(skips);
            q.params = m.params.clone();
            randomize(&mut q, &format!("{}.", head.name()), 10 + k as u64);
            let out = q.forward(&f, &p).unwrap();
            let changed = [out.shift.0 != base.shift.0, out.mask_logits != base.mask_logits, out.inpaint != base.inpaint];
            for (j, c) in changed.into_iter().enumerate() {
                assert_eq!(c, j == k, "{skips}: perturbing {} changed output {j}", head.name());
            }
        }
        // zeroing the inpainting decoder touches the inpainting only
        let before = m.forward(&f, &p).unwrap();
        m.params.fill_prefix("inpaint.", 0.0);
        let after = m.forward(&f, &p).unwrap();
        assert_eq!((after.shift.0 == before.shift.0, after.mask_logits == before.mask_logits), (true, true));
        assert_ne!(after.inpaint, before.inpaint);
    }
}

#[test]
fn one_encoder_pass_per_forward() {
    let m = small(SkipTargets::default());
    m.reset_counters();
    m.forward(&frame(), &pose()).unwrap();
    assert_eq!((m.encoder_calls(), m.pose_encoder_calls()), (1, 1));
    m.reset_counters();
    m.forward_parallel(&frame(), &pose()).unwrap();
    assert_eq!(m.encoder_calls(), 1);
}

#[test]
fn encoder_sees_every_input_pixel_region() {
    let m = small(SkipTargets::default());
    let f = frame();
    let base = m.encode_rgbd(&f).unwrap();
    for (y, x, c) in [(0usize, 0usize, 0usize), (31, 31, 2), (16, 5, 1)] {
        let mut g = f.clone();
        let v = g.rgb.at(c, y, x);
        g.rgb.set(c, y, x, if v > 0.5 { v - 0.3 } else { v + 0.3 });
        assert_ne!(m.encode_rgbd(&g).unwrap().features, base.features, "pixel ({x},{y})");
    }
    let mut g = f.clone();
    g.depth.set(0, 3, 27, g.depth.at(0, 3, 27) * 1.5);
    assert_ne!(m.encode_rgbd(&g).unwrap().features, base.features, "depth");
    assert_eq!(m.encode_rgbd(&f).unwrap(), base, "deterministic");
}

#[test]
fn pose_changes_only_the_broadcast_channels() {
    let m = small(SkipTargets::default());
    let f = frame();
    let rgbd = m.encode_rgbd(&f).unwrap();
    let d = f.median_depth();
    let a = m.encode_extrinsics(&Extrinsics::from_translation([0.01, 0.0, 0.0]), d);
    let b = m.encode_extrinsics(&Extrinsics::from_translation([0.02, 0.0, 0.0]), d);
    assert_ne!(a, b, "translation along x alone moves the embedding");
    let (la, lb) = (m.fuse_latent(&rgbd, &a), m.fuse_latent(&rgbd, &b));
    let c = la.rgbd_channels;
    let n = la.features.plane_len();
    assert_eq!(la.features.c, c + 8);
    assert_eq!(la.features.data[..c * n], lb.features.data[..c * n]);
    assert_ne!(la.features.data[c * n..], lb.features.data[c * n..]);
    assert_eq!(la.skips, lb.skips);

    let zero = m.fuse_latent(&rgbd, &[0.0; 8]);
    assert!(zero.features.data[c * n..].iter().all(|&v| v == 0.0));
}

#[test]
fn default_wiring_feeds_skips_to_mask_and_inpaint_only() {
    let m = Model::<f32>::new(ModelConfig::default()).unwrap();
    assert_eq!(m.config.skip_targets, SkipTargets::MASK_AND_INPAINT);
    assert!(m.decoder(Head::Flow).skip_stages().is_empty());
    assert_eq!(m.decoder(Head::Mask).skip_stages(), vec![2, 1, 0]);
    assert_eq!(m.decoder(Head::Inpaint).skip_stages(), vec![2, 1, 0]);
}

#[test]
fn output_ranges_and_initial_heads() {
    let mut m = small(SkipTargets::default());
    let p = m.forward(&frame(), &pose()).unwrap();
    assert!(p.shift.0.data.iter().all(|&v| v == 0.0), "zero-initialised flow head");
    assert!(p.mask.0.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(p.inpaint.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    randomize(&mut m, "flow.", 1);
    let p = m.forward(&frame(), &pose()).unwrap();
    assert!(p.shift.0.data.iter().all(|&v| v.abs() <= m.config.flow_scale as f32));
    assert!(p.shift.0.data.iter().any(|&v| v != 0.0));
}
