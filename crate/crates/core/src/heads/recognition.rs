//! Step-query attention decoder over SM3-augmented RoI features.

use std::rc::Rc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::attn_encoder::{add_positional, EncoderStack};
use crate::autodiff::Var;
use crate::datagen::ALPHABET;
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, FeatureMap, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Index of the end-of-sequence class, after the alphabet.
pub const EOS: usize = ALPHABET.len();
pub const NUM_CLASSES: usize = ALPHABET.len() + 1;

pub fn class_of(ch: char) -> Option<usize> {
    let up = ch.to_ascii_uppercase();
    ALPHABET.chars().position(|a| a == up)
}

pub fn char_of(class: usize) -> Option<char> {
    ALPHABET.chars().nth(class)
}

/// Class targets for `text`: characters, then EOS. Words longer than
/// `max_len - 1` are truncated with a warning. In `strict` mode the target
/// is padded with EOS to the full `max_len` steps.
pub fn encode_target(text: &str, max_len: usize, strict: bool) -> Result<Vec<usize>> {
    if max_len < 1 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let mut classes = Vec::with_capacity(max_len);
    for ch in text.chars() {
        match class_of(ch) {
            Some(c) => classes.push(c),
            None => warn!("character {ch:?} in {text:?} is outside the alphabet; skipped"),
        }
    }
    if classes.len() > max_len - 1 {
        warn!("transcription {text:?} longer than {} characters; truncated", max_len - 1);
        classes.truncate(max_len - 1);
    }
    classes.push(EOS);
    if strict {
        classes.resize(max_len, EOS);
    }
    Ok(classes)
}

/// Decodes the arg-max class per step up to the first EOS. Confidence is the
/// mean arg-max probability over the decoded steps including the EOS step.
pub fn decode_greedy(probs: &Tensor) -> (String, f64) {
    let k = probs.dim(1);
    let mut text = String::new();
    let mut conf = 0.0;
    let mut steps = 0;
    for row in probs.data().chunks(k) {
        let (best, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        conf += p;
        steps += 1;
        match char_of(best) {
            Some(c) => text.push(c),
            None => break,
        }
    }
    (text, if steps > 0 { conf / steps as f64 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecognizerConfig {
    /// Decoding steps `T`, including the EOS step.
    pub max_len: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Encoder layers over the RoI tokens before decoding.
    pub context_layers: usize,
    pub decoder_layers: usize,
    /// Add a bilinear crop of the input image to the RoI features.
    pub image_crop: bool,
    /// Average the loss over all `T` steps instead of up to EOS.
    pub strict_length: bool,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            max_len: 8,
            heads: 4,
            ffn_dim: 128,
            context_layers: 1,
            decoder_layers: 2,
            image_crop: true,
            strict_length: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), dim),
            self_attn: MultiHeadAttention::new(&mut pb.sub("self_attn"), dim, heads),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), dim),
            cross_attn: MultiHeadAttention::new(&mut pb.sub("cross_attn"), dim, heads),
            norm3: LayerNorm::new(&mut pb.sub("norm3"), dim),
            mlp: Mlp::new(&mut pb.sub("mlp"), dim, ffn_dim),
        }
    }

    /// `q: [T, dim]`, `memory: [tokens, dim]`. Returns the new queries and
    /// the cross-attention weights `[1, heads, T, tokens]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, q: Var<'t>, memory: Var<'t>) -> (Var<'t>, Rc<Tensor>) {
        let (t, d) = (q.shape()[0], q.shape()[1]);
        let m = memory.shape()[0];
        let batched = |x: Var<'t>, n: usize| x.reshape([1, n, d]);
        let sa = self.self_attn.forward(b, batched(self.norm1.forward(b, q), t), None);
        let q = q.add(sa.reshape([t, d]));
        let (ca, weights) = self
            .cross_attn
            .forward_cross(b, batched(self.norm2.forward(b, q), t), batched(memory, m), None);
        let q = q.add(ca.reshape([t, d]));
        let q = q.add(self.mlp.forward(b, self.norm3.forward(b, q)));
        (q, weights)
    }
}

#[derive(Clone, Debug)]
pub struct RecognitionOutput<'t> {
    /// Log-probabilities `[T, classes]`.
    pub log_probs: Var<'t>,
    /// Last-layer cross-attention averaged over heads, `[T, tokens]`.
    pub attention: Tensor,
}

impl RecognitionOutput<'_> {
    pub fn probabilities(&self) -> Tensor {
        self.log_probs.value().map(f64::exp)
    }

    pub fn decode(&self) -> (String, f64) {
        decode_greedy(&self.probabilities())
    }
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub config: RecognizerConfig,
    pub dim: usize,
    pub image_proj: Option<Linear>,
    pub down: Conv2d,
    pub context: EncoderStack,
    pub memory_norm: LayerNorm,
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
    pub classifier: Linear,
}

impl Recognizer {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, cfg: &RecognizerConfig) -> Result<Self> {
        if cfg.max_len < 1 {
            return Err(Error::Config("recognizer max_len must be at least 1".into()));
        }
        if cfg.heads == 0 || dim % cfg.heads != 0 || dim % 4 != 0 {
            return Err(Error::Config(format!("recognizer dim {dim} must be divisible by 4 and by {} heads", cfg.heads)));
        }
        Ok(Self {
            config: cfg.clone(),
            dim,
            image_proj: cfg.image_crop.then(|| Linear::new(&mut pb.sub("image_proj"), 3, dim)),
            down: Conv2d::new(&mut pb.sub("down"), dim, dim, 3, 2, 1),
            context: EncoderStack::new(&mut pb.sub("context"), dim, cfg.context_layers, cfg.heads, cfg.ffn_dim),
            memory_norm: LayerNorm::new(&mut pb.sub("memory_norm"), dim),
            queries: pb.normal("queries", &[cfg.max_len, dim], 1.0),
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(&mut pb.sub(&format!("layer{i}")), dim, cfg.heads, cfg.ffn_dim))
                .collect(),
            out_norm: LayerNorm::new(&mut pb.sub("out_norm"), dim),
            classifier: Linear::new(&mut pb.sub("classifier"), dim, NUM_CLASSES),
        })
    }

    /// Recognition input: `roi` plus `sm3` (equal shapes) plus, when enabled,
    /// a projected image crop over `bbox`.
    pub fn input<'t>(
        &self,
        b: &Binding<'t>,
        roi: FeatureMap<'t>,
        sm3: FeatureMap<'t>,
        image: Option<FeatureMap<'t>>,
        bbox: Var<'t>,
    ) -> Result<FeatureMap<'t>> {
        if (roi.h, roi.w, roi.channels()) != (sm3.h, sm3.w, sm3.channels()) || roi.channels() != self.dim {
            return Err(Error::shape(format!(
                "recognizer input {}x{}x{} vs SM3 {}x{}x{}",
                roi.h,
                roi.w,
                roi.channels(),
                sm3.h,
                sm3.w,
                sm3.channels()
            )));
        }
        let mut x = roi.data.add(sm3.data);
        if let Some(proj) = &self.image_proj {
            let img = image.ok_or_else(|| Error::InvalidInput("recognizer needs the input image for its crop branch".into()))?;
            let crop = img.data.roi_align((img.h, img.w), bbox, (roi.h, roi.w), 1.0);
            x = x.add(proj.forward(b, crop));
        }
        Ok(roi.with_data(x))
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, input: FeatureMap<'t>) -> Result<RecognitionOutput<'t>> {
        let y = self.down.forward(b, input);
        let y = add_positional(y.with_data(y.data.gelu()))?;
        let tokens = y.h * y.w;
        let ctx = self.context.forward(b, y.data.reshape([1, tokens, self.dim]), None);
        let memory = self.memory_norm.forward(b, ctx.reshape([tokens, self.dim]));
        let mut q = b.p(self.queries);
        let mut weights = None;
        for layer in &self.layers {
            let (nq, w) = layer.forward(b, q, memory);
            q = nq;
            weights = Some(w);
        }
        let logits = self.classifier.forward(b, self.out_norm.forward(b, q));
        let t = self.config.max_len;
        let attention = match weights {
            Some(w) => {
                let heads = w.dim(1);
                let mut avg = vec![0.0; t * tokens];
                for h in 0..heads {
                    let part = &w.data()[h * t * tokens..(h + 1) * t * tokens];
                    avg.iter_mut().zip(part).for_each(|(a, v)| *a += v / heads as f64);
                }
                Tensor::from_vec([t, tokens], avg)
            }
            None => Tensor::zeros([t, tokens]),
        };
        Ok(RecognitionOutput {
            log_probs: logits.log_softmax(),
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets() {
        assert_eq!(encode_target("ab", 8, false).unwrap(), [10, 11, EOS]);
        assert_eq!(encode_target("ab", 4, true).unwrap(), [10, 11, EOS, EOS]);
        assert_eq!(encode_target("ABCDEFGHI", 4, false).unwrap(), [10, 11, 12, EOS]);
    }

    #[test]
    fn eos_truncates_decoding() {
        let mut p = vec![0.0; 5 * NUM_CLASSES];
        for (step, class) in [10, 11, EOS, 12, 13].into_iter().enumerate() {
            p[step * NUM_CLASSES + class] = 1.0;
        }
        let (text, conf) = decode_greedy(&Tensor::from_vec([5, NUM_CLASSES], p));
        assert_eq!(text, "AB");
        assert_eq!(conf, 1.0);
    }
}
