//! Hierarchical windowed-attention backbone and feature pyramid.
//!
//! A stride-8 patch stem feeds three stages at strides 8, 16 and 32. Each
//! stage after the first starts with a 2x2 patch merge. Blocks alternate
//! between regular and cyclically shifted windows. The FPN adds top-down
//! nearest-neighbour upsampled projections and smooths every level with a
//! 3x3 convolution.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attn_encoder::add_positional;
use crate::autodiff::Tape;
use crate::datagen::Image;
use crate::error::{Error, Result};
use crate::nn::{space_to_depth_index, upsample_nearest, Binding, Conv2d, FeatureMap, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};
use crate::tensor::Tensor;

pub const STEM_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Channels of the three stages.
    pub stage_dims: [usize; 3],
    /// Attention blocks per stage.
    pub depths: [usize; 3],
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channel count `C` shared by every pyramid level.
    pub fpn_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_dims: [64, 128, 256],
            depths: [2, 2, 2],
            window: 4,
            heads: 4,
            mlp_ratio: 2,
            fpn_dim: 64,
        }
    }
}

/// Token-major image `[h * w, 3]` on a tape.
pub fn image_input<'t>(tape: &'t Tape, img: &Image) -> FeatureMap<'t> {
    let t = Tensor::from_vec([img.height * img.width, 3], img.data.clone());
    FeatureMap::new(tape.constant(t), img.height, img.width)
}

#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t> {
    pub p3: FeatureMap<'t>,
    pub p4: FeatureMap<'t>,
    pub p5: FeatureMap<'t>,
}

/// Stage outputs at strides 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures<'t> {
    pub c3: FeatureMap<'t>,
    pub c4: FeatureMap<'t>,
    pub c5: FeatureMap<'t>,
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Gather indices and mask for (shifted) window attention on an `h x w` map.
pub struct WindowPlan {
    /// `[h * w, c]` to `[windows, win_h * win_w, c]`.
    pub forward: Rc<[usize]>,
    /// The inverse permutation, back to token order.
    pub inverse: Rc<[usize]>,
    pub windows: usize,
    pub tokens_per_window: usize,
    /// `[windows, t, t]` additive mask; present only when shifted.
    pub mask: Option<Rc<Tensor>>,
}

impl WindowPlan {
    pub fn new(h: usize, w: usize, c: usize, win_h: usize, win_w: usize, shift_h: usize, shift_w: usize) -> Self {
        assert!(h % win_h == 0 && w % win_w == 0, "window {win_h}x{win_w} does not tile {h}x{w}");
        let (nwy, nwx) = (h / win_h, w / win_w);
        let t = win_h * win_w;
        let windows = nwy * nwx;
        let mut order = Vec::with_capacity(h * w);
        let mut labels = Vec::with_capacity(h * w);
        let region = |s: usize, len: usize, win: usize, shift: usize| {
            if shift == 0 || s < len - win {
                0
            } else if s < len - shift {
                1
            } else {
                2
            }
        };
        for wy in 0..nwy {
            for wx in 0..nwx {
                for ly in 0..win_h {
                    for lx in 0..win_w {
                        let (sy, sx) = (wy * win_h + ly, wx * win_w + lx);
                        let (oy, ox) = ((sy + shift_h) % h, (sx + shift_w) % w);
                        order.push(oy * w + ox);
                        labels.push(region(sy, h, win_h, shift_h) * 3 + region(sx, w, win_w, shift_w));
                    }
                }
            }
        }
        let mut forward = Vec::with_capacity(h * w * c);
        for &tok in &order {
            forward.extend((0..c).map(|ch| tok * c + ch));
        }
        let mut inverse = vec![0; h * w * c];
        for (pos, &tok) in order.iter().enumerate() {
            for ch in 0..c {
                inverse[tok * c + ch] = pos * c + ch;
            }
        }
        let mask = (shift_h > 0 || shift_w > 0).then(|| {
            let mut m = vec![0.0; windows * t * t];
            for win in 0..windows {
                for i in 0..t {
                    for j in 0..t {
                        if labels[win * t + i] != labels[win * t + j] {
                            m[(win * t + i) * t + j] = f64::NEG_INFINITY;
                        }
                    }
                }
            }
            Rc::new(Tensor::from_vec([windows, t, t], m))
        });
        Self {
            forward: forward.into(),
            inverse: inverse.into(),
            windows,
            tokens_per_window: t,
            mask,
        }
    }
}

/// Pre-norm block: window attention then MLP, both residual.
#[derive(Clone, Debug)]
pub struct WindowBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shifted: bool,
}

impl WindowBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, mlp_ratio: usize, window: usize, shifted: bool) -> Self {
        Self {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), dim),
            attn: MultiHeadAttention::new(&mut pb.sub("attn"), dim, heads),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), dim),
            mlp: Mlp::new(&mut pb.sub("mlp"), dim, dim * mlp_ratio),
            window,
            shifted,
        }
    }

    pub fn plan(&self, h: usize, w: usize, c: usize) -> WindowPlan {
        let wh = largest_divisor_at_most(h, self.window);
        let ww = largest_divisor_at_most(w, self.window);
        let sh = if self.shifted && wh < h { wh / 2 } else { 0 };
        let sw = if self.shifted && ww < w { ww / 2 } else { 0 };
        WindowPlan::new(h, w, c, wh, ww, sh, sw)
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: FeatureMap<'t>) -> FeatureMap<'t> {
        let c = x.channels();
        let n = x.h * x.w;
        let plan = self.plan(x.h, x.w, c);
        let normed = self.norm1.forward(b, x.data);
        let wins = normed.gather(plan.forward.clone(), [plan.windows, plan.tokens_per_window, c]);
        let att = self.attn.forward(b, wins, plan.mask.clone());
        let back = att.reshape([n, c]).gather(plan.inverse.clone(), [n, c]);
        let y = x.data.add(back);
        let y = y.add(self.mlp.forward(b, self.norm2.forward(b, y)));
        x.with_data(y)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Stem projection (first stage) or patch-merge projection.
    pub embed_norm: LayerNorm,
    pub embed: Linear,
    pub blocks: Vec<WindowBlock>,
    pub out_norm: LayerNorm,
    pub factor: usize,
    pub in_dim: usize,
    pub first: bool,
}

impl Stage {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig, idx: usize) -> Self {
        let dim = cfg.stage_dims[idx];
        let (factor, in_dim, first) = if idx == 0 {
            (STEM_STRIDE, 3, true)
        } else {
            (2, cfg.stage_dims[idx - 1], false)
        };
        let patch = factor * factor * in_dim;
        // the stem normalizes after projection, a merge before it
        let norm_dim = if first { dim } else { patch };
        Self {
            embed_norm: LayerNorm::new(&mut pb.sub("embed_norm"), norm_dim),
            embed: if first {
                Linear::new(&mut pb.sub("embed"), patch, dim)
            } else {
                Linear::no_bias(&mut pb.sub("embed"), patch, dim)
            },
            blocks: (0..cfg.depths[idx])
                .map(|i| WindowBlock::new(&mut pb.sub(&format!("block{i}")), dim, cfg.heads, cfg.mlp_ratio, cfg.window, i % 2 == 1))
                .collect(),
            out_norm: LayerNorm::new(&mut pb.sub("out_norm"), dim),
            factor,
            in_dim,
            first,
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: FeatureMap<'t>) -> Result<FeatureMap<'t>> {
        let f = self.factor;
        let (oh, ow) = (x.h / f, x.w / f);
        let patches = x.data.gather(space_to_depth_index(x.h, x.w, self.in_dim, f), [oh * ow, f * f * self.in_dim]);
        let mut y = if self.first {
            let e = self.embed_norm.forward(b, self.embed.forward(b, patches));
            add_positional(FeatureMap::new(e, oh, ow))?
        } else {
            FeatureMap::new(self.embed.forward(b, self.embed_norm.forward(b, patches)), oh, ow)
        };
        for blk in &self.blocks {
            y = blk.forward(b, y);
        }
        Ok(y.with_data(self.out_norm.forward(b, y.data)))
    }
}

#[derive(Clone, Debug)]
pub struct Fpn {
    pub lateral: [Linear; 3],
    pub smooth: [Conv2d; 3],
}

impl Fpn {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Self {
        let c = cfg.fpn_dim;
        let lateral = std::array::from_fn(|i| Linear::new(&mut pb.sub(&format!("lateral{}", i + 3)), cfg.stage_dims[i], c));
        let smooth = std::array::from_fn(|i| Conv2d::new(&mut pb.sub(&format!("smooth{}", i + 3)), c, c, 3, 1, 1));
        Self { lateral, smooth }
    }

    pub fn fuse<'t>(&self, b: &Binding<'t>, s: &StageFeatures<'t>) -> Result<FeaturePyramid<'t>> {
        let (c3, c4, c5) = (s.c3, s.c4, s.c5);
        if c4.h * 2 != c3.h || c4.w * 2 != c3.w || c5.h * 2 != c4.h || c5.w * 2 != c4.w {
            return Err(Error::shape(format!(
                "pyramid levels {}x{}, {}x{}, {}x{} are not in 2x ratios",
                c3.h, c3.w, c4.h, c4.w, c5.h, c5.w
            )));
        }
        for (i, m) in [c3, c4, c5].iter().enumerate() {
            if m.channels() != self.lateral[i].in_dim {
                return Err(Error::shape(format!(
                    "stage {} has {} channels, lateral expects {}",
                    i + 3,
                    m.channels(),
                    self.lateral[i].in_dim
                )));
            }
        }
        let t5 = c5.with_data(self.lateral[2].forward(b, c5.data));
        let t4 = c4.with_data(self.lateral[1].forward(b, c4.data).add(upsample_nearest(t5).data));
        let t3 = c3.with_data(self.lateral[0].forward(b, c3.data).add(upsample_nearest(t4).data));
        Ok(FeaturePyramid {
            p3: self.smooth[0].forward(b, t3),
            p4: self.smooth[1].forward(b, t4),
            p5: self.smooth[2].forward(b, t5),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    pub fpn: Fpn,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        for &d in &cfg.stage_dims {
            if cfg.heads == 0 || d % cfg.heads != 0 {
                return Err(Error::Config(format!("stage dim {d} not divisible by {} heads", cfg.heads)));
            }
        }
        if cfg.stage_dims[0] % 4 != 0 || cfg.window == 0 {
            return Err(Error::Config("first stage dim must be divisible by 4 and window positive".into()));
        }
        Ok(Self {
            config: cfg.clone(),
            stages: (0..3).map(|i| Stage::new(&mut pb.sub(&format!("stage{i}")), cfg, i)).collect(),
            fpn: Fpn::new(&mut pb.sub("fpn"), cfg),
        })
    }

    /// Three stage outputs of a `[h * w, 3]` image.
    pub fn extract_features<'t>(&self, b: &Binding<'t>, image: FeatureMap<'t>) -> Result<StageFeatures<'t>> {
        if image.h % 32 != 0 || image.w % 32 != 0 || image.h == 0 || image.w == 0 {
            return Err(Error::shape(format!("image {}x{} is not a multiple of 32", image.h, image.w)));
        }
        if image.channels() != 3 {
            return Err(Error::shape(format!("image has {} channels, expected 3", image.channels())));
        }
        let c3 = self.stages[0].forward(b, image)?;
        let c4 = self.stages[1].forward(b, c3)?;
        let c5 = self.stages[2].forward(b, c4)?;
        Ok(StageFeatures { c3, c4, c5 })
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, image: FeatureMap<'t>) -> Result<FeaturePyramid<'t>> {
        let s = self.extract_features(b, image)?;
        self.fpn.fuse(b, &s)
    }
}

/// Runs a backbone over a batch, one image at a time.
pub fn forward_batch<'t>(bb: &Backbone, b: &Binding<'t>, images: &[FeatureMap<'t>]) -> Result<Vec<FeaturePyramid<'t>>> {
    images.iter().map(|im| bb.forward(b, *im)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_plan_is_a_permutation() {
        let p = WindowPlan::new(4, 4, 2, 2, 2, 1, 1);
        let mut seen = vec![false; 32];
        for &i in p.forward.iter() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        for (pos, &i) in p.inverse.iter().enumerate() {
            assert_eq!(p.forward[i], pos);
        }
        assert!(p.mask.is_some());
    }

    #[test]
    fn unshifted_plan_has_no_mask() {
        assert!(WindowPlan::new(4, 4, 1, 2, 2, 0, 0).mask.is_none());
    }

    #[test]
    fn divisor_clamp() {
        assert_eq!(largest_divisor_at_most(6, 4), 3);
        assert_eq!(largest_divisor_at_most(2, 4), 2);
        assert_eq!(largest_divisor_at_most(7, 4), 1);
    }
}
