//! Transformer encoder over pyramid levels, producing the soft attention
//! features. The coarsest level becomes `f1`, the finest `f3`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Binding, EncoderLayer, FeatureMap, ParamBuilder};
use crate::tensor::Tensor;

/// Fixed 2D sinusoidal encoding as a token-major `[h * w, c]` table.
///
/// Channels `[0, c/2)` encode the row, `[c/2, c)` the column. Within each half,
/// pair `i` holds `sin(p * f_i), cos(p * f_i)` with `f_i = 10000^(-2i / (c/2))`.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::shape(format!("positional encoding needs channels divisible by 4, got {c}")));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| 10000f64.powf(-((2 * i) as f64) / half as f64)).collect();
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
            for (i, f) in freqs.iter().enumerate() {
                let (sy, cy) = (y as f64 * f).sin_cos();
                let (sx, cx) = (x as f64 * f).sin_cos();
                row[2 * i] = sy;
                row[2 * i + 1] = cy;
                row[half + 2 * i] = sx;
                row[half + 2 * i + 1] = cx;
            }
        }
    }
    Ok(Tensor::from_vec([h * w, c], data))
}

/// Adds the positional encoding of the map's grid.
pub fn add_positional<'t>(map: FeatureMap<'t>) -> Result<FeatureMap<'t>> {
    let pe = positional_encoding(map.h, map.w, map.channels())?;
    let pe = map.data.tape().constant(pe);
    Ok(map.with_data(map.data.add(pe)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Largest token count a single encoder call may process.
    pub max_tokens: usize,
    /// Encode all three levels as one sequence instead of one call per level.
    pub joint: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_tokens: 4096,
            joint: false,
        }
    }
}

/// A stack of pre-norm encoder layers.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, layers: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| EncoderLayer::new(&mut pb.sub(&format!("layer{i}")), dim, heads, ffn_dim))
                .collect(),
        }
    }

    /// `x: [batch, tokens, dim]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, mut x: Var<'t>, mask: Option<Rc<Tensor>>) -> Var<'t> {
        for layer in &self.layers {
            x = layer.forward(b, x, mask.clone());
        }
        x
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SoftAttentionFeatures<'t> {
    /// Stride 32, from P5.
    pub f1: FeatureMap<'t>,
    /// Stride 16, from P4.
    pub f2: FeatureMap<'t>,
    /// Stride 8, from P3.
    pub f3: FeatureMap<'t>,
}

#[derive(Clone, Debug)]
pub struct AttnEncoder {
    pub config: EncoderConfig,
    pub stack: EncoderStack,
    pub dim: usize,
}

impl AttnEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, config: &EncoderConfig) -> Result<Self> {
        if config.heads == 0 || dim % config.heads != 0 {
            return Err(Error::Config(format!("encoder dim {dim} not divisible by {} heads", config.heads)));
        }
        Ok(Self {
            config: config.clone(),
            stack: EncoderStack::new(&mut pb.sub("stack"), dim, config.layers, config.heads, config.ffn_dim),
            dim,
        })
    }

    fn check_capacity(&self, tokens: usize) -> Result<()> {
        if tokens > self.config.max_tokens {
            return Err(Error::Capacity(format!(
                "{tokens} tokens exceed the encoder limit of {}; raise encoder.max_tokens or use a smaller image",
                self.config.max_tokens
            )));
        }
        Ok(())
    }

    /// Encodes one level: flatten, add positional encoding, run the stack.
    pub fn encode_level<'t>(&self, b: &Binding<'t>, level: FeatureMap<'t>) -> Result<FeatureMap<'t>> {
        let n = level.h * level.w;
        self.check_capacity(n)?;
        let x = add_positional(level)?;
        let y = self.stack.forward(b, x.data.reshape([1, n, self.dim]), None);
        Ok(level.with_data(y.reshape([n, self.dim])))
    }

    pub fn encode_pyramid<'t>(&self, b: &Binding<'t>, pyr: &FeaturePyramid<'t>) -> Result<SoftAttentionFeatures<'t>> {
        if !self.config.joint {
            return Ok(SoftAttentionFeatures {
                f1: self.encode_level(b, pyr.p5)?,
                f2: self.encode_level(b, pyr.p4)?,
                f3: self.encode_level(b, pyr.p3)?,
            });
        }
        let levels = [pyr.p5, pyr.p4, pyr.p3];
        let sizes: Vec<usize> = levels.iter().map(|l| l.h * l.w).collect();
        let total: usize = sizes.iter().sum();
        self.check_capacity(total)?;
        let parts: Vec<Var<'t>> = levels.iter().map(|l| add_positional(*l).map(|m| m.data)).collect::<Result<_>>()?;
        let joint = Var::concat_rows(&parts).reshape([1, total, self.dim]);
        let y = self.stack.forward(b, joint, None).reshape([total, self.dim]);
        let mut start = 0;
        let mut out = Vec::with_capacity(3);
        for (l, n) in levels.iter().zip(&sizes) {
            let idx: Rc<[usize]> = (start * self.dim..(start + n) * self.dim).collect();
            out.push(l.with_data(y.gather(idx, [*n, self.dim])));
            start += n;
        }
        Ok(SoftAttentionFeatures {
            f1: out[0],
            f2: out[1],
            f3: out[2],
        })
    }
}
