mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textspot::attn_encoder::SoftAttentionFeatures;
use textspot::autodiff::Tape;
use textspot::nn::{Binding, FeatureMap, ParamBuilder, ParamStore};
use textspot::same::{roi_crop_attention, stop_gradient_gate, RoiAttentionCrop, Same, SameConfig};
use textspot::tensor::Tensor;

#[test]
fn matches_scalar_reference_on_random_instances() {
    for seed in 0..20 {
        let d = same_oracle_case(seed);
        assert!(d < 1e-9, "seed {seed}: max diff {d}");
    }
}

fn features<'t>(tape: &'t Tape, maps: [(&Tensor, usize, usize); 3]) -> SoftAttentionFeatures<'t> {
    let f = |(t, h, w): (&Tensor, usize, usize)| FeatureMap::new(tape.leaf(t.clone()), h, w);
    SoftAttentionFeatures {
        f1: f(maps[0]),
        f2: f(maps[1]),
        f3: f(maps[2]),
    }
}

#[test]
fn crop_of_one_cell_is_that_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f1 = Tensor::uniform([16, 3], -1.0, 1.0, &mut rng);
    let f2 = Tensor::zeros([64, 3]);
    let f3 = Tensor::zeros([256, 3]);
    let tape = Tape::new();
    let feats = features(&tape, [(&f1, 4, 4), (&f2, 8, 8), (&f3, 16, 16)]);
    // cell (row 1, col 2) of the stride-32 level
    let bbox = tape.constant(Tensor::from_vec([4], vec![64.0, 32.0, 96.0, 64.0]));
    let crop = roi_crop_attention(&feats, bbox, 1).unwrap();
    let cell = &f1.data()[(4 + 2) * 3..(4 + 2) * 3 + 3];
    assert_eq!(crop.a1.data.value().data(), cell);
}

#[test]
fn constant_map_gives_constant_crops() {
    let tape = Tape::new();
    let [c1, c2, c3] = [Tensor::full([16, 2], 0.7), Tensor::full([64, 2], 0.7), Tensor::full([256, 2], 0.7)];
    let feats = features(&tape, [(&c1, 4, 4), (&c2, 8, 8), (&c3, 16, 16)]);
    let bbox = tape.constant(Tensor::from_vec([4], vec![3.0, 10.5, 77.0, 101.0]));
    let crop = roi_crop_attention(&feats, bbox, 4).unwrap();
    for (m, side) in [(crop.a1, 4), (crop.a2, 8), (crop.a3, 16)] {
        assert_eq!((m.h, m.w), (side, side));
        assert!(m.data.value().data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }
}

#[test]
fn crop_matches_bilinear_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let f1 = Tensor::uniform([64, 2], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let z2 = Tensor::zeros([256, 2]);
        let z3 = Tensor::zeros([1024, 2]);
        let feats = features(&tape, [(&f1, 8, 8), (&z2, 16, 16), (&z3, 32, 32)]);
        let r = Tensor::uniform([4], 0.0, 256.0, &mut rng);
        let (x0, x1) = (r.data()[0].min(r.data()[1]), r.data()[0].max(r.data()[1]) + 1.0);
        let (y0, y1) = (r.data()[2].min(r.data()[3]), r.data()[2].max(r.data()[3]) + 1.0);
        let bbox = tape.constant(Tensor::from_vec([4], vec![x0, y0, x1, y1]));
        let crop = roi_crop_attention(&feats, bbox, 4).unwrap();
        let want = bilinear_crop(&grid_from_tokens(&f1, 8, 8), [x0, y0, x1, y1], 4, 32.0);
        assert!(max_abs_diff(crop.a1.data.value().data(), &flatten(&want)) < 1e-12);
    }
}

#[test]
fn degenerate_boxes_are_rejected() {
    let tape = Tape::new();
    let z = [Tensor::zeros([16, 2]), Tensor::zeros([64, 2]), Tensor::zeros([256, 2])];
    let feats = features(&tape, [(&z[0], 4, 4), (&z[1], 8, 8), (&z[2], 16, 16)]);
    for b in [[10.0, 10.0, 10.0, 20.0], [10.0, 20.0, 30.0, 5.0], [f64::NAN, 0.0, 4.0, 4.0]] {
        let bbox = tape.constant(Tensor::from_vec([4], b.to_vec()));
        assert!(roi_crop_attention(&feats, bbox, 4).is_err(), "{b:?}");
    }
}

fn module(cfg: &SameConfig, dim: usize, seed: u64) -> (Same, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = Same::new(&mut ParamBuilder::new(&mut store, &mut rng, "same"), dim, cfg).unwrap();
    (same, store)
}

fn zero_crop(tape: &Tape, s: usize, c: usize) -> RoiAttentionCrop<'_> {
    let z = |side: usize| FeatureMap::new(tape.constant(Tensor::zeros([side * side, c])), side, side);
    RoiAttentionCrop {
        a1: z(s),
        a2: z(2 * s),
        a3: z(4 * s),
    }
}

#[test]
fn zero_inputs_give_half_masks() {
    let cfg = SameConfig {
        roi_size: 4,
        zero_init_upsamplers: true,
        ..SameConfig::default()
    };
    let (same, store) = module(&cfg, 8, 0);
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let d1 = FeatureMap::new(tape.constant(Tensor::zeros([16, 8])), 4, 4);
    let rm = same.hierarchical_embed(&b, d1, &zero_crop(&tape, 4, 8)).unwrap();
    for m in [rm.m1, rm.m2, rm.m3] {
        assert!(m.data.value().data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn identity_upsampling_telescopes() {
    // 1x1 d1 with weights that copy every channel to all four outputs
    let cfg = SameConfig {
        roi_size: 1,
        heads: 1,
        mask_positional: false,
        ..SameConfig::default()
    };
    let c = 2;
    let (same, mut store) = module(&cfg, c, 0);
    let mut eye = vec![0.0; c * 4 * c];
    for i in 0..c {
        for sub in 0..4 {
            eye[i * 4 * c + sub * c + i] = 1.0;
        }
    }
    for name in ["same.up_d1", "same.up_d2"] {
        store.set(&format!("{name}.weight"), Tensor::from_vec([c, 4 * c], eye.clone())).unwrap();
        store.set(&format!("{name}.bias"), Tensor::zeros([c])).unwrap();
    }
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let d1v = Tensor::from_vec([1, c], vec![0.3, -1.2]);
    let a2 = Tensor::from_vec([4, c], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a3 = Tensor::uniform([16, c], -1.0, 1.0, &mut rng);
    let crop = RoiAttentionCrop {
        a1: FeatureMap::new(tape.constant(Tensor::zeros([1, c])), 1, 1),
        a2: FeatureMap::new(tape.constant(a2.clone()), 2, 2),
        a3: FeatureMap::new(tape.constant(a3.clone()), 4, 4),
    };
    let rm = same.hierarchical_embed(&b, FeatureMap::new(tape.constant(d1v.clone()), 1, 1), &crop).unwrap();
    let d2 = rm.d2.data.value();
    for p in 0..4 {
        for ch in 0..c {
            assert!((d2.at(&[p, ch]) - (d1v.data()[ch] + a2.at(&[p, ch]))).abs() < 1e-15);
        }
    }
    let d3 = rm.d3.data.value();
    for y in 0..4 {
        for x in 0..4 {
            let parent = (y / 2) * 2 + x / 2;
            for ch in 0..c {
                let want = d1v.data()[ch] + a2.at(&[parent, ch]) + a3.at(&[y * 4 + x, ch]);
                assert!((d3.at(&[y * 4 + x, ch]) - want).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn fusion_degenerate_cases() {
    let cfg = SameConfig {
        roi_size: 2,
        heads: 1,
        mask_positional: false,
        zero_init_upsamplers: true,
        ..SameConfig::default()
    };
    let c = 2;
    let (same, store) = module(&cfg, c, 0);
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a1 = Tensor::uniform([4, c], -1.0, 1.0, &mut rng);
    let a2 = Tensor::uniform([16, c], -1.0, 1.0, &mut rng);
    let crop = RoiAttentionCrop {
        a1: FeatureMap::new(tape.constant(a1.clone()), 2, 2),
        a2: FeatureMap::new(tape.constant(a2.clone()), 4, 4),
        a3: FeatureMap::new(tape.constant(Tensor::zeros([64, c])), 8, 8),
    };
    // M1 = 0 (very negative d1): SM1 = a1
    let mut rm = same
        .hierarchical_embed(&b, FeatureMap::new(tape.constant(Tensor::full([4, c], -800.0)), 2, 2), &crop)
        .unwrap();
    // M2 = 1 with zero upsamplers and SM1 irrelevant: SM2 = a2
    rm.m2 = FeatureMap::new(tape.constant(Tensor::full([16, c], 1.0)), 4, 4);
    let fu = same.fuse_attention_masks(&b, &rm, &crop).unwrap();
    assert_eq!(fu.sm1.data.value().data(), a1.data());
    assert_eq!(fu.sm2.data.value().data(), a2.data());
}

#[test]
fn mismatched_crop_is_a_shape_error() {
    let cfg = SameConfig {
        roi_size: 2,
        heads: 1,
        mask_positional: false,
        ..SameConfig::default()
    };
    let (same, store) = module(&cfg, 2, 0);
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let mut crop = zero_crop(&tape, 2, 2);
    crop.a2 = FeatureMap::new(tape.constant(Tensor::zeros([9, 2])), 3, 3);
    let d1 = FeatureMap::new(tape.constant(Tensor::zeros([4, 2])), 2, 2);
    let err = same.hierarchical_embed(&b, d1, &crop).unwrap_err();
    assert_eq!(err.kind(), "shape");
}

#[test]
fn gate_blocks_only_the_gated_path() {
    let cfg = SameConfig {
        roi_size: 2,
        heads: 1,
        mask_positional: false,
        ..SameConfig::default()
    };
    let (same, store) = module(&cfg, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let crops = [1, 2, 4].map(|k| Tensor::uniform([4 * k * k, 2], -1.0, 1.0, &mut rng));
    let mask = Tensor::uniform([4, 1], -1.0, 1.0, &mut rng);
    let run = |blocked: bool| {
        let tape = Tape::new();
        let b = Binding::trainable(&tape, &store);
        let leaves: Vec<_> = crops.iter().map(|t| tape.leaf(t.clone())).collect();
        let crop = RoiAttentionCrop {
            a1: FeatureMap::new(leaves[0], 2, 2),
            a2: FeatureMap::new(leaves[1], 4, 4),
            a3: FeatureMap::new(leaves[2], 8, 8),
        };
        let out = same.forward_crop(&b, tape.leaf(mask.clone()), crop).unwrap();
        let gated = stop_gradient_gate(out.fusion.sm3, blocked);
        let downstream = gated.data.square().sum();
        let side = out.refined.m1.data.sum();
        let g = tape.backward(downstream.add(side));
        let grads: Vec<Tensor> = leaves.iter().map(|l| g.wrt(*l)).collect();
        (gated.data.value().data().to_vec(), grads)
    };
    let (open_vals, open) = run(false);
    let (shut_vals, shut) = run(true);
    assert_eq!(open_vals, shut_vals);
    assert!(open[2].data().iter().any(|v| v.abs() > 1e-12));
    // only the side term (which never touches the crops) remains
    assert!(shut.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masks_stay_in_open_unit_interval(seed in 0u64..10_000, scale in 0.1f64..6.0) {
        let cfg = SameConfig { roi_size: 2, heads: 2, mask_positional: false, ..SameConfig::default() };
        let (same, store) = module(&cfg, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let crop = RoiAttentionCrop {
            a1: FeatureMap::new(tape.constant(Tensor::uniform([4, 4], -scale, scale, &mut rng)), 2, 2),
            a2: FeatureMap::new(tape.constant(Tensor::uniform([16, 4], -scale, scale, &mut rng)), 4, 4),
            a3: FeatureMap::new(tape.constant(Tensor::uniform([64, 4], -scale, scale, &mut rng)), 8, 8),
        };
        let mask = tape.constant(Tensor::uniform([4, 1], -scale, scale, &mut rng));
        let out = same.forward_crop(&b, mask, crop).unwrap();
        for m in [out.refined.m1, out.refined.m2, out.refined.m3] {
            prop_assert!(m.data.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        prop_assert_eq!((out.fusion.sm3.h, out.fusion.sm3.w), (8, 8));
    }
}
