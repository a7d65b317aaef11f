//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests. Everything here works on plain nested vectors so it
//! shares no code with the tape.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textspot::datagen::{TextInstanceGt, DO_NOT_CARE};
use textspot::evalkit::geometry::rectangle;
use textspot::evalkit::{EvalImage, Prediction};
use textspot::nn::ParamStore;
use textspot::tensor::Tensor;

/// `[y][x][channel]`.
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn grid_from_tokens(t: &Tensor, h: usize, w: usize) -> Grid {
    let c = t.numel() / (h * w);
    (0..h)
        .map(|y| (0..w).map(|x| t.data()[(y * w + x) * c..(y * w + x + 1) * c].to_vec()).collect())
        .collect()
}

pub fn flatten(g: &Grid) -> Vec<f64> {
    g.iter().flatten().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Adds uniform noise in `±scale` to every parameter, so that constant
/// initializations (norm gains, zero biases) are exercised too.
pub fn jitter_store(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = store.by_name(&name).unwrap().clone();
        let noise = Tensor::uniform(t.shape().to_vec(), -scale, scale, &mut rng);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        store.set(&name, Tensor::from_vec(t.shape().to_vec(), data)).unwrap();
    }
}

pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub prefix: String,
}

impl<'a> Params<'a> {
    pub fn new(store: &'a ParamStore, prefix: &str) -> Self {
        Self { store, prefix: prefix.into() }
    }

    pub fn sub(&self, name: &str) -> Params<'a> {
        Params {
            store: self.store,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn get(&self, name: &str) -> &'a Tensor {
        let full = format!("{}.{name}", self.prefix);
        self.store.by_name(&full).unwrap_or_else(|| panic!("no parameter {full}"))
    }
}

pub fn linear(p: &Params<'_>, x: &[f64]) -> Vec<f64> {
    let w = p.get("weight");
    let (n_in, n_out) = (w.dim(0), w.dim(1));
    assert_eq!(x.len(), n_in);
    let bias = p.store.by_name(&format!("{}.bias", p.prefix));
    (0..n_out)
        .map(|o| {
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * n_out + o];
            }
            acc
        })
        .collect()
}

pub fn layer_norm(p: &Params<'_>, x: &[f64]) -> Vec<f64> {
    let (g, b) = (p.get("gamma"), p.get("beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i])
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Multi-head scaled dot-product attention of `queries` over `memory`.
pub fn attention(p: &Params<'_>, queries: &[Vec<f64>], memory: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let q: Vec<Vec<f64>> = queries.iter().map(|x| linear(&p.sub("q"), x)).collect();
    let k: Vec<Vec<f64>> = memory.iter().map(|x| linear(&p.sub("k"), x)).collect();
    let v: Vec<Vec<f64>> = memory.iter().map(|x| linear(&p.sub("v"), x)).collect();
    let dim = q[0].len();
    let d = dim / heads;
    let scale = 1.0 / (d as f64).sqrt();
    q.iter()
        .map(|qi| {
            let mut mixed = vec![0.0; dim];
            for h in 0..heads {
                let r = h * d..(h + 1) * d;
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                for (wj, vj) in softmax(&scores).iter().zip(&v) {
                    for c in r.clone() {
                        mixed[c] += wj * vj[c];
                    }
                }
            }
            linear(&p.sub("out"), &mixed)
        })
        .collect()
}

/// Pre-norm encoder layer over a token list.
pub fn encoder_layer(p: &Params<'_>, x: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let normed: Vec<Vec<f64>> = x.iter().map(|t| layer_norm(&p.sub("norm1"), t)).collect();
    let att = attention(&p.sub("attn"), &normed, &normed, heads);
    let x: Vec<Vec<f64>> = x.iter().zip(&att).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    x.iter()
        .map(|t| {
            let n = layer_norm(&p.sub("norm2"), t);
            let hidden: Vec<f64> = linear(&p.sub("mlp.fc1"), &n).into_iter().map(gelu).collect();
            let out = linear(&p.sub("mlp.fc2"), &hidden);
            t.iter().zip(out).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Stride-2, kernel-2 transposed convolution; weight `[in, 4 * out]` with
/// columns ordered `(dy, dx, out)`.
pub fn upsample2x(p: &Params<'_>, g: &Grid) -> Grid {
    let w = p.get("weight");
    let bias = p.get("bias");
    let n_out = bias.numel();
    let cols = w.dim(1);
    let (h, wd) = (g.len(), g[0].len());
    let mut out = vec![vec![vec![0.0; n_out]; 2 * wd]; 2 * h];
    for y in 0..h {
        for x in 0..wd {
            for dy in 0..2 {
                for dx in 0..2 {
                    for o in 0..n_out {
                        let mut acc = bias.data()[o];
                        for (i, v) in g[y][x].iter().enumerate() {
                            acc += v * w.data()[i * cols + (dy * 2 + dx) * n_out + o];
                        }
                        out[2 * y + dy][2 * x + dx][o] = acc;
                    }
                }
            }
        }
    }
    out
}

fn zip_grid(a: &Grid, b: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
    assert_eq!((a.len(), a[0].len(), a[0][0].len()), (b.len(), b[0].len(), b[0][0].len()), "grid shapes");
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| f(*x, *y)).collect()).collect())
        .collect()
}

fn map_grid(a: &Grid, f: impl Fn(f64) -> f64) -> Grid {
    a.iter().map(|r| r.iter().map(|c| c.iter().map(|x| f(*x)).collect()).collect()).collect()
}

pub struct SameReference {
    pub d: [Grid; 3],
    pub m: [Grid; 3],
    pub sm: [Grid; 3],
}

/// The soft attention mask embedding written out loop by loop. `mask` holds
/// `S * S` rows of mask-channel logits; `crops` are `a1..a3`. No positional
/// encoding is added to the mask tokens.
pub fn same_reference(p: &Params<'_>, side: usize, heads: usize, layers: usize, mask: &[Vec<f64>], crops: &[Grid; 3]) -> SameReference {
    let mut tokens: Vec<Vec<f64>> = mask.iter().map(|m| linear(&p.sub("mask_proj"), m)).collect();
    for l in 0..layers {
        tokens = encoder_layer(&p.sub(&format!("mask_encoder.layer{l}")), &tokens, heads);
    }
    let d1: Grid = (0..side).map(|y| (0..side).map(|x| tokens[y * side + x].clone()).collect()).collect();
    let d2 = zip_grid(&upsample2x(&p.sub("up_d1"), &d1), &crops[1], |a, b| a + b);
    let d3 = zip_grid(&upsample2x(&p.sub("up_d2"), &d2), &crops[2], |a, b| a + b);
    let m1 = map_grid(&d1, sigmoid);
    let m2 = map_grid(&d2, sigmoid);
    let m3 = map_grid(&d3, sigmoid);
    let sm1 = zip_grid(&zip_grid(&m1, &d1, |a, b| a * b), &crops[0], |a, b| a + b);
    let sm2 = zip_grid(&m2, &zip_grid(&upsample2x(&p.sub("up_sm1"), &sm1), &crops[1], |a, b| a + b), |a, b| a * b);
    let sm3 = zip_grid(&m3, &zip_grid(&upsample2x(&p.sub("up_sm2"), &sm2), &crops[2], |a, b| a + b), |a, b| a * b);
    SameReference {
        d: [d1, d2, d3],
        m: [m1, m2, m3],
        sm: [sm1, sm2, sm3],
    }
}

/// Bilinear sampling of one output cell per bin centre, grid coordinates
/// `pixel / stride - 0.5`, clamped at the border.
pub fn bilinear_crop(g: &Grid, bbox: [f64; 4], out: usize, stride: f64) -> Grid {
    let (h, w) = (g.len(), g[0].len());
    let coord = |lo: f64, hi: f64, k: usize, len: usize| {
        let pixel = lo + (k as f64 + 0.5) * (hi - lo) / out as f64;
        let c = (pixel / stride - 0.5).max(0.0).min((len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, c - i0 as f64)
    };
    (0..out)
        .map(|i| {
            let (y0, y1, ty) = coord(bbox[1], bbox[3], i, h);
            (0..out)
                .map(|j| {
                    let (x0, x1, tx) = coord(bbox[0], bbox[2], j, w);
                    (0..g[0][0].len())
                        .map(|c| {
                            (1.0 - ty) * (1.0 - tx) * g[y0][x0][c]
                                + (1.0 - ty) * tx * g[y0][x1][c]
                                + ty * (1.0 - tx) * g[y1][x0][c]
                                + ty * tx * g[y1][x1][c]
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn gt(x0: f64, y0: f64, x1: f64, y1: f64, text: &str) -> TextInstanceGt {
    TextInstanceGt {
        polygon: rectangle(x0, y0, x1, y1),
        transcription: text.into(),
        legible: text != DO_NOT_CARE,
    }
}

fn pred(x0: f64, y0: f64, x1: f64, y1: f64, text: &str) -> Prediction {
    Prediction {
        polygon: rectangle(x0, y0, x1, y1),
        transcription: text.into(),
        confidence: 0.9,
    }
}

/// Five hand-built images covering exact and near matches, a do-not-care
/// region, a false positive, a miss, an empty image and lexicon repairs.
///
/// | image | detection (matched / preds / gts) | correct: none, full, strong, weak, generic |
/// |-------|-----------------------------------|--------------------------------------------|
/// | 1     | 2 / 2 / 2                         | 1, 2, 2, 2, 2                              |
/// | 2     | 1 / 2 / 1 (one pred absorbed)     | 1, 1, 1, 1, 1                              |
/// | 3     | 1 / 2 / 2                         | 1, 1, 1, 1, 1                              |
/// | 4     | 0 / 0 / 1                         | 0, 0, 0, 0, 0                              |
/// | 5     | 1 / 1 / 1                         | 0, 1, 1, 1, 0                              |
///
/// Totals: detection 5/7 both ways; end-to-end 3/7, 5/7, 5/7, 5/7, 4/7.
/// Use with [`fixture_generic_words`] and a strong lexicon size of 7.
pub fn evaluation_fixture() -> Vec<EvalImage> {
    vec![
        EvalImage {
            sample_id: "fx1".into(),
            ground_truth: vec![gt(0.0, 0.0, 40.0, 10.0, "HELLO"), gt(50.0, 0.0, 90.0, 10.0, "WORLD")],
            predictions: vec![pred(0.0, 0.0, 40.0, 10.0, "HELLO"), pred(50.0, 0.0, 90.0, 10.0, "W0RLD")],
        },
        EvalImage {
            sample_id: "fx2".into(),
            ground_truth: vec![gt(0.0, 0.0, 40.0, 10.0, "TEXT"), gt(50.0, 0.0, 90.0, 10.0, DO_NOT_CARE)],
            predictions: vec![
                // IoU 350 / 450
                pred(5.0, 0.0, 45.0, 10.0, "text"),
                pred(52.0, 0.0, 90.0, 10.0, "XYZ"),
                pred(0.0, 30.0, 40.0, 40.0, "SPOT"),
            ],
        },
        EvalImage {
            sample_id: "fx3".into(),
            ground_truth: vec![gt(0.0, 0.0, 50.0, 10.0, "SCENE"), gt(0.0, 20.0, 40.0, 30.0, "STOP")],
            // the second prediction overlaps STOP with IoU 1/3
            predictions: vec![pred(0.0, 0.0, 50.0, 10.0, "scene!"), pred(20.0, 20.0, 60.0, 30.0, "STOP")],
        },
        EvalImage {
            sample_id: "fx4".into(),
            ground_truth: vec![gt(0.0, 0.0, 30.0, 10.0, "CAT")],
            predictions: vec![],
        },
        EvalImage {
            sample_id: "fx5".into(),
            ground_truth: vec![gt(0.0, 0.0, 30.0, 10.0, "DOG")],
            predictions: vec![pred(0.0, 0.0, 30.0, 10.0, "DOC")],
        },
    ]
}

/// Extra generic words; `DOC` turns the last image's near miss into an exact
/// (wrong) lexicon hit.
pub fn fixture_generic_words() -> Vec<String> {
    vec!["DOC".into(), "WORD".into()]
}

/// One random C = 2, S = 2 instance: parameters, mask logits and crops drawn
/// from `seed`. Returns the largest absolute difference between the module
/// and [`same_reference`] over every intermediate map.
pub fn same_oracle_case(seed: u64) -> f64 {
    use textspot::autodiff::Tape;
    use textspot::nn::{Binding, FeatureMap, ParamBuilder};
    use textspot::same::{RoiAttentionCrop, Same, SameConfig};

    let cfg = SameConfig {
        roi_size: 2,
        mask_channels: 1,
        mask_layers: 1,
        heads: 2,
        ffn_dim: 4,
        mask_positional: false,
        ..SameConfig::default()
    };
    let (dim, s) = (2, 2);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = Same::new(&mut ParamBuilder::new(&mut store, &mut rng, "same"), dim, &cfg).unwrap();
    jitter_store(&mut store, seed.wrapping_add(1000), 0.3);

    let mask = Tensor::uniform([s * s, 1], -2.0, 2.0, &mut rng);
    let crops = [1, 2, 4].map(|k| Tensor::uniform([k * s * k * s, dim], -1.0, 1.0, &mut rng));

    let tape = Tape::new();
    let b = Binding::trainable(&tape, &store);
    let fm = |t: &Tensor, side: usize| FeatureMap::new(tape.leaf(t.clone()), side, side);
    let crop = RoiAttentionCrop {
        a1: fm(&crops[0], s),
        a2: fm(&crops[1], 2 * s),
        a3: fm(&crops[2], 4 * s),
    };
    let out = same.forward_crop(&b, tape.leaf(mask.clone()), crop).unwrap();

    let mask_rows: Vec<Vec<f64>> = mask.data().chunks(1).map(<[f64]>::to_vec).collect();
    let crop_grids = [
        grid_from_tokens(&crops[0], s, s),
        grid_from_tokens(&crops[1], 2 * s, 2 * s),
        grid_from_tokens(&crops[2], 4 * s, 4 * s),
    ];
    let r = same_reference(&Params::new(&store, "same"), s, cfg.heads, cfg.mask_layers, &mask_rows, &crop_grids);
    let rm = &out.refined;
    let fu = &out.fusion;
    let pairs = [
        (rm.d1, &r.d[0]),
        (rm.d2, &r.d[1]),
        (rm.d3, &r.d[2]),
        (rm.m1, &r.m[0]),
        (rm.m2, &r.m[1]),
        (rm.m3, &r.m[2]),
        (fu.sm1, &r.sm[0]),
        (fu.sm2, &r.sm[1]),
        (fu.sm3, &r.sm[2]),
    ];
    pairs
        .iter()
        .map(|(got, want)| max_abs_diff(got.data.value().data(), &flatten(want)))
        .fold(0.0, f64::max)
}
