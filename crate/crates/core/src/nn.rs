//! Parameter storage and the layers shared by every network module.
//!
//! Modules hold [`ParamId`]s into a [`ParamStore`]. A forward pass binds the
//! store onto a tape with [`Binding`] and looks parameters up by id.

use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.name(*id).starts_with(prefix))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}

/// The parameters of a store recorded on one tape.
pub struct Binding<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    /// Binds every parameter as a differentiable leaf.
    pub fn trainable(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars = store.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Self { tape, vars }
    }

    /// Binds every parameter as a constant (inference).
    pub fn frozen(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars = store.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        Self { tape, vars }
    }

    /// Binds pre-made vars, in store order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Self { tape, vars }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let path = self.path(name);
        self.store.insert(path, Tensor::full(shape, value))
    }
}

/// A token-major `[h * w, c]` feature map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap<'t> {
    pub data: Var<'t>,
    pub h: usize,
    pub w: usize,
}

impl<'t> FeatureMap<'t> {
    pub fn new(data: Var<'t>, h: usize, w: usize) -> Self {
        let shape = data.shape();
        assert!(
            shape.len() == 2 && shape[0] == h * w,
            "feature map {h}x{w} with data {shape:?}"
        );
        Self { data, h, w }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn with_data(&self, data: Var<'t>) -> Self {
        Self::new(data, self.h, self.w)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Self {
        let weight = pb.uniform("weight", &[in_dim, out_dim], in_dim);
        let bias = Some(pb.constant("bias", &[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Self {
        let weight = pb.uniform("weight", &[in_dim, out_dim], in_dim);
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    /// Applies to `[m, in]`, returning `[m, out]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(b.p(self.weight));
        match self.bias {
            Some(bias) => y.add_row(b.p(bias)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        Self {
            gamma: pb.constant("gamma", &[dim], 1.0),
            beta: pb.constant("beta", &[dim], 0.0),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(b.p(self.gamma), b.p(self.beta), Self::EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&mut pb.sub("fc1"), dim, hidden),
            fc2: Linear::new(&mut pb.sub("fc2"), hidden, dim),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(b, self.fc1.forward(b, x).gelu())
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(&mut pb.sub("q"), dim, dim),
            k: Linear::new(&mut pb.sub("k"), dim, dim),
            v: Linear::new(&mut pb.sub("v"), dim, dim),
            out: Linear::new(&mut pb.sub("out"), dim, dim),
            heads,
        }
    }

    /// Self-attention over `[batch, tokens, dim]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>, mask: Option<Rc<Tensor>>) -> Var<'t> {
        self.forward_cross(b, x, x, mask).0
    }

    /// Attention of `queries: [batch, tq, dim]` over `memory: [batch, tk, dim]`.
    /// Also returns the attention weights `[batch, heads, tq, tk]`.
    pub fn forward_cross<'t>(
        &self,
        b: &Binding<'t>,
        queries: Var<'t>,
        memory: Var<'t>,
        mask: Option<Rc<Tensor>>,
    ) -> (Var<'t>, Rc<Tensor>) {
        let qs = queries.shape();
        let ms = memory.shape();
        let (bq, tq, dim) = (qs[0], qs[1], qs[2]);
        let tk = ms[1];
        let flat_q = queries.reshape([bq * tq, dim]);
        let flat_m = memory.reshape([bq * tk, dim]);
        let q = self.q.forward(b, flat_q).reshape([bq, tq, dim]);
        let k = self.k.forward(b, flat_m).reshape([bq, tk, dim]);
        let v = self.v.forward(b, flat_m).reshape([bq, tk, dim]);
        let att = q.attention(k, v, self.heads, mask);
        let y = self
            .out
            .forward(b, att.output.reshape([bq * tq, dim]))
            .reshape([bq, tq, dim]);
        (y, att.weights)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), dim),
            attn: MultiHeadAttention::new(&mut pb.sub("attn"), dim, heads),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), dim),
            mlp: Mlp::new(&mut pb.sub("mlp"), dim, ffn_dim),
        }
    }

    /// `x: [batch, tokens, dim]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>, mask: Option<Rc<Tensor>>) -> Var<'t> {
        let shape = x.shape();
        let rows = shape[0] * shape[1];
        let dim = shape[2];
        let flat = x.reshape([rows, dim]);
        let normed = self.norm1.forward(b, flat).reshape(shape.clone());
        let x = flat.add(self.attn.forward(b, normed, mask).reshape([rows, dim]));
        let y = x.add(self.mlp.forward(b, self.norm2.forward(b, x)));
        y.reshape(shape)
    }
}

/// 2D convolution on token-major maps, via im2col and one matrix product.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        Self {
            weight: pb.uniform("weight", &[fan_in, out_ch], fan_in),
            bias: pb.constant("bias", &[out_ch], 0.0),
            kernel,
            stride,
            padding,
            in_ch,
            out_ch,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: FeatureMap<'t>) -> FeatureMap<'t> {
        assert_eq!(x.channels(), self.in_ch, "conv input channels");
        let (oh, ow) = self.output_size(x.h, x.w);
        let cols = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            x.data
        } else {
            let idx = im2col_index(x.h, x.w, self.in_ch, self.kernel, self.stride, self.padding);
            x.data.gather(idx, [oh * ow, self.kernel * self.kernel * self.in_ch])
        };
        let y = cols.matmul(b.p(self.weight)).add_row(b.p(self.bias));
        FeatureMap::new(y, oh, ow)
    }
}

/// Learnable 2x upsampling: a stride-2, kernel-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Upsample2x {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Upsample2x {
    pub fn new(pb: &mut ParamBuilder<'_>, in_ch: usize, out_ch: usize) -> Self {
        Self {
            weight: pb.uniform("weight", &[in_ch, 4 * out_ch], in_ch),
            bias: pb.constant("bias", &[out_ch], 0.0),
            in_ch,
            out_ch,
        }
    }

    pub fn zeroed(pb: &mut ParamBuilder<'_>, in_ch: usize, out_ch: usize) -> Self {
        Self {
            weight: pb.constant("weight", &[in_ch, 4 * out_ch], 0.0),
            bias: pb.constant("bias", &[out_ch], 0.0),
            in_ch,
            out_ch,
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: FeatureMap<'t>) -> FeatureMap<'t> {
        assert_eq!(x.channels(), self.in_ch, "upsample input channels");
        let y = x.data.matmul(b.p(self.weight));
        let idx = depth_to_space_index(x.h, x.w, self.out_ch, 2);
        let y = y
            .gather(idx, [4 * x.h * x.w, self.out_ch])
            .add_row(b.p(self.bias));
        FeatureMap::new(y, 2 * x.h, 2 * x.w)
    }
}

/// Gather index turning a `[h * w, c]` map into `[oh * ow, k * k * c]` patches
/// with `(ky, kx, c)` column order.
pub fn im2col_index(h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Rc<[usize]> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut idx = Vec::with_capacity(oh * ow * k * k * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let x = (ox * stride + kx) as isize - pad as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for ch in 0..c {
                        idx.push(if inside {
                            (y as usize * w + x as usize) * c + ch
                        } else {
                            PAD
                        });
                    }
                }
            }
        }
    }
    idx.into()
}

/// Gather index taking `[h * w, f * f * c]` (columns ordered `(dy, dx, c)`)
/// to `[(f h) * (f w), c]`.
pub fn depth_to_space_index(h: usize, w: usize, c: usize, f: usize) -> Rc<[usize]> {
    let (oh, ow) = (h * f, w * f);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let src_row = (y / f) * w + x / f;
            let sub = (y % f) * f + x % f;
            for ch in 0..c {
                idx.push(src_row * f * f * c + sub * c + ch);
            }
        }
    }
    idx.into()
}

/// Gather index taking `[h * w, c]` to `[(h / f) * (w / f), f * f * c]`,
/// columns ordered `(dy, dx, c)`.
pub fn space_to_depth_index(h: usize, w: usize, c: usize, f: usize) -> Rc<[usize]> {
    assert!(h % f == 0 && w % f == 0, "space_to_depth: {h}x{w} not divisible by {f}");
    let (oh, ow) = (h / f, w / f);
    let mut idx = Vec::with_capacity(h * w * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..f {
                for dx in 0..f {
                    let row = (oy * f + dy) * w + ox * f + dx;
                    for ch in 0..c {
                        idx.push(row * c + ch);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Gather index for nearest-neighbour 2x upsampling of a `[h * w, c]` map.
pub fn upsample_nearest_index(h: usize, w: usize, c: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(4 * h * w * c);
    for y in 0..2 * h {
        for x in 0..2 * w {
            let row = (y / 2) * w + x / 2;
            for ch in 0..c {
                idx.push(row * c + ch);
            }
        }
    }
    idx.into()
}

pub fn upsample_nearest<'t>(x: FeatureMap<'t>) -> FeatureMap<'t> {
    let c = x.channels();
    let idx = upsample_nearest_index(x.h, x.w, c);
    FeatureMap::new(x.data.gather(idx, [4 * x.h * x.w, c]), 2 * x.h, 2 * x.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn map(tape: &Tape, h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureMap<'_> {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        FeatureMap::new(tape.leaf(Tensor::from_vec([h * w, c], data)), h, w)
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut ParamBuilder::new(&mut store, &mut rng, "c"), 2, 3, 3, 2, 1);
        store.set("c.bias", Tensor::from_vec([3], vec![0.1, -0.2, 0.3])).unwrap();
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let x = map(&tape, 5, 4, 2, |y, x, c| (y * 7 + x * 3 + c) as f64 * 0.1 - 1.0);
        let y = conv.forward(&b, x);
        assert_eq!((y.h, y.w), (3, 2));
        let wt = store.get(conv.weight);
        let xv = x.data.value();
        let yv = y.data.value();
        for oy in 0..3 {
            for ox in 0..2 {
                for o in 0..3 {
                    let mut acc = store.get(conv.bias).data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                continue;
                            }
                            for c in 0..2 {
                                let xin = xv.at(&[iy as usize * 4 + ix as usize, c]);
                                acc += xin * wt.at(&[(ky * 3 + kx) * 2 + c, o]);
                            }
                        }
                    }
                    assert!((yv.at(&[oy * 2 + ox, o]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn space_to_depth_inverts_depth_to_space() {
        let tape = Tape::new();
        let x = map(&tape, 4, 6, 3, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let s = x.data.gather(space_to_depth_index(4, 6, 3, 2), [6, 12]);
        let back = s.gather(depth_to_space_index(2, 3, 3, 2), [24, 3]);
        assert_eq!(back.value().data(), x.data.value().data());
    }

    #[test]
    fn nearest_upsample_repeats() {
        let tape = Tape::new();
        let x = map(&tape, 1, 2, 1, |_, x, _| x as f64 + 1.0);
        let u = upsample_nearest(x);
        assert_eq!(u.data.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn upsample2x_zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let up = Upsample2x::new(&mut ParamBuilder::new(&mut store, &mut rng, "u"), 2, 2);
        store.set("u.weight", Tensor::zeros([2, 8])).unwrap();
        store.set("u.bias", Tensor::from_vec([2], vec![0.5, -1.0])).unwrap();
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let x = map(&tape, 2, 2, 2, |y, x, c| (y + x + c) as f64);
        let y = up.forward(&b, x);
        assert_eq!((y.h, y.w), (4, 4));
        for row in y.data.value().data().chunks(2) {
            assert_eq!(row, &[0.5, -1.0]);
        }
    }
}
