mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textspot::attn_encoder::{positional_encoding, AttnEncoder, EncoderConfig, EncoderStack};
use textspot::autodiff::Tape;
use textspot::backbone::{forward_batch, image_input, Backbone, BackboneConfig, Fpn, StageFeatures, WindowBlock};
use textspot::datagen::Image;
use textspot::nn::{Binding, FeatureMap, ParamBuilder, ParamStore};
use textspot::tensor::Tensor;

fn random_image(seed: u64, side: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::uniform([side * side * 3], 0.0, 1.0, &mut rng);
    Image {
        width: side,
        height: side,
        data: t.into_data(),
    }
}

fn desk_backbone() -> (Backbone, ParamStore) {
    let cfg = BackboneConfig {
        stage_dims: [32, 64, 128],
        depths: [2, 2, 2],
        window: 4,
        heads: 4,
        mlp_ratio: 2,
        fpn_dim: 32,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bb = Backbone::new(&mut ParamBuilder::new(&mut store, &mut rng, "backbone"), &cfg).unwrap();
    (bb, store)
}

#[test]
fn pyramid_shapes_for_a_64_pixel_image() {
    let (bb, store) = desk_backbone();
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let pyr = bb.forward(&b, image_input(&tape, &random_image(1, 64))).unwrap();
    for (m, side) in [(pyr.p3, 8), (pyr.p4, 4), (pyr.p5, 2)] {
        assert_eq!((m.h, m.w, m.channels()), (side, side, 32));
        assert_eq!(m.data.shape(), vec![side * side, 32]);
    }
    let bad = Image::filled(48, 64, [0.0; 3]);
    assert_eq!(bb.forward(&b, image_input(&tape, &bad)).unwrap_err().kind(), "shape");
}

#[test]
fn batch_order_commutes_with_forward() {
    let (bb, store) = desk_backbone();
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let imgs = [random_image(2, 32), random_image(3, 32), Image::filled(32, 32, [0.0; 3])];
    let fwd: Vec<_> = imgs.iter().map(|i| image_input(&tape, i)).collect();
    let rev: Vec<_> = fwd.iter().rev().copied().collect();
    let a = forward_batch(&bb, &b, &fwd).unwrap();
    let r = forward_batch(&bb, &b, &rev).unwrap();
    for (x, y) in a.iter().zip(r.iter().rev()) {
        assert_eq!(x.p3.data.value().data(), y.p3.data.value().data());
        assert_eq!(x.p5.data.value().data(), y.p5.data.value().data());
    }
}

#[test]
fn full_window_equals_global_attention() {
    for shifted in [false, true] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = WindowBlock::new(&mut ParamBuilder::new(&mut store, &mut rng, "blk"), 8, 2, 2, 4, shifted);
        jitter_store(&mut store, 5, 0.2);
        let x = Tensor::uniform([16, 8], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let y = blk.forward(&b, FeatureMap::new(tape.constant(x.clone()), 4, 4));
        let tokens: Vec<Vec<f64>> = x.data().chunks(8).map(<[f64]>::to_vec).collect();
        let want: Vec<f64> = encoder_layer(&Params::new(&store, "blk"), &tokens, 2).concat();
        assert!(max_abs_diff(y.data.value().data(), &want) < 1e-12, "shifted={shifted}");
    }
}

fn conv3x3(w: &Tensor, bias: &Tensor, g: &Grid) -> Grid {
    let (h, wd) = (g.len() as isize, g[0].len() as isize);
    (0..h)
        .map(|y| {
            (0..wd)
                .map(|x| {
                    let mut acc = bias.data()[0];
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if sy >= 0 && sy < h && sx >= 0 && sx < wd {
                                acc += w.data()[(ky * 3 + kx) as usize] * g[sy as usize][sx as usize][0];
                            }
                        }
                    }
                    vec![acc]
                })
                .collect()
        })
        .collect()
}

fn fpn_reference(store: &ParamStore, maps: [&Grid; 3]) -> [Grid; 3] {
    let p = Params::new(store, "fpn");
    let lat = |k: usize, g: &Grid| -> Grid {
        let q = p.sub(&format!("lateral{}", k + 3));
        let (w, b) = (q.get("weight").data()[0], q.get("bias").data()[0]);
        g.iter().map(|r| r.iter().map(|c| vec![w * c[0] + b]).collect()).collect()
    };
    let up_add = |coarse: &Grid, fine: Grid| -> Grid {
        fine.iter()
            .enumerate()
            .map(|(y, r)| r.iter().enumerate().map(|(x, c)| vec![c[0] + coarse[y / 2][x / 2][0]]).collect())
            .collect()
    };
    let t5 = lat(2, maps[2]);
    let t4 = up_add(&t5, lat(1, maps[1]));
    let t3 = up_add(&t4, lat(0, maps[0]));
    let smooth = |k: usize, g: &Grid| {
        let q = p.sub(&format!("smooth{}", k + 3));
        conv3x3(q.get("weight"), q.get("bias"), g)
    };
    [smooth(0, &t3), smooth(1, &t4), smooth(2, &t5)]
}

fn one_channel_fpn(seed: u64) -> (Fpn, ParamStore, [Tensor; 3]) {
    let cfg = BackboneConfig {
        stage_dims: [1, 1, 1],
        fpn_dim: 1,
        ..BackboneConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fpn = Fpn::new(&mut ParamBuilder::new(&mut store, &mut rng, "fpn"), &cfg);
    jitter_store(&mut store, seed + 1, 0.5);
    let maps = [64, 16, 4].map(|n| Tensor::uniform([n, 1], -1.0, 1.0, &mut rng));
    (fpn, store, maps)
}

fn run_fpn(fpn: &Fpn, store: &ParamStore, maps: &[Tensor; 3]) -> [Vec<f64>; 3] {
    let tape = Tape::new();
    let b = Binding::frozen(&tape, store);
    let m = |t: &Tensor, s: usize| FeatureMap::new(tape.constant(t.clone()), s, s);
    let s = StageFeatures {
        c3: m(&maps[0], 8),
        c4: m(&maps[1], 4),
        c5: m(&maps[2], 2),
    };
    let pyr = fpn.fuse(&b, &s).unwrap();
    [pyr.p3, pyr.p4, pyr.p5].map(|p| p.data.value().data().to_vec())
}

#[test]
fn fpn_matches_scalar_reference() {
    for seed in 0..5 {
        let (fpn, store, maps) = one_channel_fpn(seed);
        let got = run_fpn(&fpn, &store, &maps);
        let grids = [grid_from_tokens(&maps[0], 8, 8), grid_from_tokens(&maps[1], 4, 4), grid_from_tokens(&maps[2], 2, 2)];
        let want = fpn_reference(&store, [&grids[0], &grids[1], &grids[2]]);
        for (g, w) in got.iter().zip(&want) {
            assert!(max_abs_diff(g, &flatten(w)) < 1e-12);
        }
    }
}

#[test]
fn zero_laterals_leave_only_the_top_level() {
    let (fpn, mut store, maps) = one_channel_fpn(7);
    for k in ["fpn.lateral3", "fpn.lateral4"] {
        store.set(&format!("{k}.weight"), Tensor::zeros([1, 1])).unwrap();
        store.set(&format!("{k}.bias"), Tensor::zeros([1])).unwrap();
    }
    let base = run_fpn(&fpn, &store, &maps);
    let mut other = maps.clone();
    other[0] = Tensor::full([64, 1], 3.0);
    other[1] = Tensor::full([16, 1], -2.0);
    assert_eq!(base, run_fpn(&fpn, &store, &other));
}

/// Sinusoid table written from the channel layout description: first half
/// rows, second half columns, alternating sine and cosine per frequency.
fn pe_reference(h: usize, w: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let pos = if ch < half { y } else { x } as f64;
                let k = ch % half;
                let freq = 1.0 / 10000f64.powf((k - k % 2) as f64 / half as f64);
                out.push(if k % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() });
            }
        }
    }
    out
}

#[test]
fn positional_table_matches_reference() {
    for (h, w, c) in [(1, 1, 4), (3, 5, 8), (8, 8, 32), (2, 7, 64)] {
        let pe = positional_encoding(h, w, c).unwrap();
        assert!(max_abs_diff(pe.data(), &pe_reference(h, w, c)) < 1e-12);
    }
}

fn encoder(layers: usize, dim: usize, seed: u64) -> (AttnEncoder, ParamStore) {
    let cfg = EncoderConfig {
        layers,
        heads: 2,
        ffn_dim: 16,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = AttnEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng, "enc"), dim, &cfg).unwrap();
    jitter_store(&mut store, seed + 3, 0.2);
    (enc, store)
}

#[test]
fn single_token_reduces_to_residual_value_path_and_mlp() {
    let (enc, store) = encoder(1, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::uniform([1, 8], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let y = enc.encode_level(&b, FeatureMap::new(tape.constant(x.clone()), 1, 1)).unwrap();
    // a lone key gets attention weight exactly one: the block is
    // x + out(v(ln1 x)) followed by the residual MLP
    let p = Params::new(&store, "enc.stack.layer0");
    let pe = positional_encoding(1, 1, 8).unwrap();
    let x0: Vec<f64> = x.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();
    let v = linear(&p.sub("attn.v"), &layer_norm(&p.sub("norm1"), &x0));
    let att = linear(&p.sub("attn.out"), &v);
    let x1: Vec<f64> = x0.iter().zip(&att).map(|(a, b)| a + b).collect();
    let hidden: Vec<f64> = linear(&p.sub("mlp.fc1"), &layer_norm(&p.sub("norm2"), &x1)).into_iter().map(gelu).collect();
    let want: Vec<f64> = x1.iter().zip(linear(&p.sub("mlp.fc2"), &hidden)).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(y.data.value().data(), &want) < 1e-12);
}

#[test]
fn zero_layers_add_only_the_positional_table() {
    let (enc, store) = encoder(0, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform([12, 8], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let y = enc.encode_level(&b, FeatureMap::new(tape.constant(x.clone()), 3, 4)).unwrap();
    let pe = positional_encoding(3, 4, 8).unwrap();
    let want: Vec<f64> = x.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();
    assert_eq!(y.data.value().data(), want.as_slice());
    assert_eq!((y.h, y.w), (3, 4));
}

#[test]
fn pyramid_encoding_keeps_level_shapes() {
    for joint in [false, true] {
        let (mut enc, store) = encoder(1, 8, 3);
        enc.config.joint = joint;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let m = |s: usize, rng: &mut ChaCha8Rng| FeatureMap::new(tape.constant(Tensor::uniform([s * s, 8], -1.0, 1.0, rng)), s, s);
        let pyr = textspot::backbone::FeaturePyramid {
            p3: m(8, &mut rng),
            p4: m(4, &mut rng),
            p5: m(2, &mut rng),
        };
        let f = enc.encode_pyramid(&b, &pyr).unwrap();
        assert_eq!([(f.f1.h, f.f1.w), (f.f2.h, f.f2.w), (f.f3.h, f.f3.w)], [(2, 2), (4, 4), (8, 8)]);
        assert_eq!(f.f3.data.shape(), vec![64, 8]);
    }
}

#[test]
fn token_limit_is_a_capacity_error() {
    let (mut enc, store) = encoder(1, 8, 4);
    enc.config.max_tokens = 10;
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let err = enc
        .encode_level(&b, FeatureMap::new(tape.constant(Tensor::zeros([16, 8])), 4, 4))
        .unwrap_err();
    assert_eq!(err.kind(), "capacity");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encoder_stack_is_permutation_equivariant(seed in 0u64..100_000, n in 2usize..9) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = EncoderStack::new(&mut ParamBuilder::new(&mut store, &mut rng, "s"), 8, 2, 2, 16);
        let x = Tensor::uniform([n, 8], -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let px: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec()).collect();
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let y = stack.forward(&b, tape.constant(x.reshape([1, n, 8]).unwrap()), None).value();
        let py = stack.forward(&b, tape.constant(Tensor::from_vec([1, n, 8], px)), None).value();
        for (k, &i) in perm.iter().enumerate() {
            let a = &y.data()[i * 8..(i + 1) * 8];
            let c = &py.data()[k * 8..(k + 1) * 8];
            prop_assert!(max_abs_diff(a, c) < 1e-12);
        }
    }
}
