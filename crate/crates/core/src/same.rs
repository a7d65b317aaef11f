//! Soft attention mask embedding, per text instance.
//!
//! ```text
//! d1  = TrE(mask)                       M_i = sigmoid(d_i)
//! d2  = U(d1) + a2                      SM1 = M1 * d1 + a1
//! d3  = U(d2) + a3                      SM2 = M2 * (U(SM1) + a2)
//!                                       SM3 = M3 * (U(SM2) + a3)
//! ```
//!
//! `a1..a3` are RoI crops of `f1..f3` at `S`, `2S` and `4S` over the same
//! box, and `U` is a learned 2x transposed convolution. The fusion path
//! upsamples `SM1` and `SM2` before adding the next crop so every sum is
//! between maps of equal size. Shapes are checked strictly; nothing
//! broadcasts.

use serde::{Deserialize, Serialize};

use crate::attn_encoder::{add_positional, EncoderStack, SoftAttentionFeatures};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binding, FeatureMap, Linear, ParamBuilder, Upsample2x};

/// Strides of `f1`, `f2`, `f3` relative to the input image.
pub const LEVEL_STRIDES: [f64; 3] = [32.0, 16.0, 8.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SameConfig {
    /// Base RoI side `S`.
    pub roi_size: usize,
    /// Channels of the incoming mask logits.
    pub mask_channels: usize,
    /// Encoder layers of the mask transformer.
    pub mask_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Reuse the two refinement upsamplers on the fusion path.
    pub shared_upsamplers: bool,
    /// Start every upsampler at zero.
    pub zero_init_upsamplers: bool,
    /// Add the 2D positional encoding to the mask tokens. Requires a channel
    /// count divisible by 4.
    pub mask_positional: bool,
}

impl Default for SameConfig {
    fn default() -> Self {
        Self {
            roi_size: 16,
            mask_channels: 1,
            mask_layers: 2,
            heads: 4,
            ffn_dim: 128,
            shared_upsamplers: false,
            zero_init_upsamplers: false,
            mask_positional: true,
        }
    }
}

/// Crops of the three attention levels over one box.
#[derive(Clone, Copy, Debug)]
pub struct RoiAttentionCrop<'t> {
    pub a1: FeatureMap<'t>,
    pub a2: FeatureMap<'t>,
    pub a3: FeatureMap<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct RefinedMasks<'t> {
    pub d1: FeatureMap<'t>,
    pub d2: FeatureMap<'t>,
    pub d3: FeatureMap<'t>,
    pub m1: FeatureMap<'t>,
    pub m2: FeatureMap<'t>,
    pub m3: FeatureMap<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionMaps<'t> {
    pub sm1: FeatureMap<'t>,
    pub sm2: FeatureMap<'t>,
    pub sm3: FeatureMap<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct SameOutput<'t> {
    pub crop: RoiAttentionCrop<'t>,
    pub refined: RefinedMasks<'t>,
    pub fusion: FusionMaps<'t>,
}

fn add_checked<'t>(a: FeatureMap<'t>, b: FeatureMap<'t>, what: &str) -> Result<FeatureMap<'t>> {
    if a.h != b.h || a.w != b.w || a.channels() != b.channels() {
        return Err(Error::shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.h,
            a.w,
            a.channels(),
            b.h,
            b.w,
            b.channels()
        )));
    }
    Ok(a.with_data(a.data.add(b.data)))
}

fn mul_checked<'t>(a: FeatureMap<'t>, b: FeatureMap<'t>, what: &str) -> Result<FeatureMap<'t>> {
    if a.h != b.h || a.w != b.w || a.channels() != b.channels() {
        return Err(Error::shape(format!("{what}: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(a.with_data(a.data.mul(b.data)))
}

fn sigmoid_map(x: FeatureMap<'_>) -> FeatureMap<'_> {
    x.with_data(x.data.sigmoid())
}

/// Validates an `(x_min, y_min, x_max, y_max)` box var.
pub fn check_box(bbox: Var<'_>) -> Result<[f64; 4]> {
    let v = bbox.value();
    if v.numel() != 4 {
        return Err(Error::shape(format!("box has {} values", v.numel())));
    }
    let b = [v.data()[0], v.data()[1], v.data()[2], v.data()[3]];
    if !b.iter().all(|x| x.is_finite()) || b[2] <= b[0] || b[3] <= b[1] {
        return Err(Error::InvalidInput(format!("degenerate box {b:?}")));
    }
    Ok(b)
}

/// Bilinear crops of `f1 -> S x S`, `f2 -> 2S x 2S`, `f3 -> 4S x 4S`.
pub fn roi_crop_attention<'t>(feats: &SoftAttentionFeatures<'t>, bbox: Var<'t>, roi_size: usize) -> Result<RoiAttentionCrop<'t>> {
    if roi_size < 1 {
        return Err(Error::InvalidInput("RoI size must be positive".into()));
    }
    check_box(bbox)?;
    let crop = |f: FeatureMap<'t>, side: usize, stride: f64| {
        FeatureMap::new(f.data.roi_align((f.h, f.w), bbox, (side, side), stride), side, side)
    };
    Ok(RoiAttentionCrop {
        a1: crop(feats.f1, roi_size, LEVEL_STRIDES[0]),
        a2: crop(feats.f2, 2 * roi_size, LEVEL_STRIDES[1]),
        a3: crop(feats.f3, 4 * roi_size, LEVEL_STRIDES[2]),
    })
}

/// Stop-gradient gate: identity forward; when `blocked`, no gradient passes.
pub fn stop_gradient_gate(sm3: FeatureMap<'_>, blocked: bool) -> FeatureMap<'_> {
    if blocked {
        sm3.with_data(sm3.data.detach())
    } else {
        sm3
    }
}

#[derive(Clone, Debug)]
pub struct Same {
    pub config: SameConfig,
    pub dim: usize,
    pub mask_proj: Linear,
    pub mask_encoder: EncoderStack,
    /// `up_d1, up_d2, up_sm1, up_sm2`; the last two alias the first two when shared.
    pub upsamplers: Vec<Upsample2x>,
}

impl Same {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, cfg: &SameConfig) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!("SAME dim {dim} must be divisible by {} heads", cfg.heads)));
        }
        if cfg.mask_positional && dim % 4 != 0 {
            return Err(Error::Config(format!(
                "SAME dim {dim} is not divisible by 4; disable mask_positional to run without positional encoding"
            )));
        }
        let names: &[&str] = if cfg.shared_upsamplers {
            &["up_d1", "up_d2"]
        } else {
            &["up_d1", "up_d2", "up_sm1", "up_sm2"]
        };
        let mut upsamplers: Vec<Upsample2x> = names
            .iter()
            .map(|n| {
                if cfg.zero_init_upsamplers {
                    Upsample2x::zeroed(&mut pb.sub(n), dim, dim)
                } else {
                    Upsample2x::new(&mut pb.sub(n), dim, dim)
                }
            })
            .collect();
        if cfg.shared_upsamplers {
            upsamplers.extend_from_within(..);
        }
        Ok(Self {
            config: cfg.clone(),
            dim,
            mask_proj: Linear::new(&mut pb.sub("mask_proj"), cfg.mask_channels, dim),
            mask_encoder: EncoderStack::new(&mut pb.sub("mask_encoder"), dim, cfg.mask_layers, cfg.heads, cfg.ffn_dim),
            upsamplers,
        })
    }

    /// `d1 = TrE(mask)` for mask logits `[S * S, C_m]`.
    pub fn mask_transformer_encode<'t>(&self, b: &Binding<'t>, mask: Var<'t>) -> Result<FeatureMap<'t>> {
        let s = self.config.roi_size;
        if mask.shape() != [s * s, self.config.mask_channels] {
            return Err(Error::shape(format!(
                "mask logits {:?}, expected [{}, {}]",
                mask.shape(),
                s * s,
                self.config.mask_channels
            )));
        }
        let tokens = FeatureMap::new(self.mask_proj.forward(b, mask), s, s);
        let x = if self.config.mask_positional { add_positional(tokens)? } else { tokens };
        let y = self.mask_encoder.forward(b, x.data.reshape([1, s * s, self.dim]), None);
        Ok(x.with_data(y.reshape([s * s, self.dim])))
    }

    /// Refinement: `d2 = U(d1) + a2`, `d3 = U(d2) + a3`, `M_i = sigmoid(d_i)`.
    pub fn hierarchical_embed<'t>(&self, b: &Binding<'t>, d1: FeatureMap<'t>, crop: &RoiAttentionCrop<'t>) -> Result<RefinedMasks<'t>> {
        self.check_channels(d1)?;
        let d2 = add_checked(self.upsamplers[0].forward(b, d1), crop.a2, "U(d1) + a2")?;
        let d3 = add_checked(self.upsamplers[1].forward(b, d2), crop.a3, "U(d2) + a3")?;
        Ok(RefinedMasks {
            d1,
            d2,
            d3,
            m1: sigmoid_map(d1),
            m2: sigmoid_map(d2),
            m3: sigmoid_map(d3),
        })
    }

    /// Fusion: `SM1 = M1 * d1 + a1`, `SM2 = M2 * (U(SM1) + a2)`, `SM3 = M3 * (U(SM2) + a3)`.
    pub fn fuse_attention_masks<'t>(&self, b: &Binding<'t>, rm: &RefinedMasks<'t>, crop: &RoiAttentionCrop<'t>) -> Result<FusionMaps<'t>> {
        let sm1 = add_checked(mul_checked(rm.m1, rm.d1, "M1 * d1")?, crop.a1, "M1 * d1 + a1")?;
        let up1 = add_checked(self.upsamplers[2].forward(b, sm1), crop.a2, "U(SM1) + a2")?;
        let sm2 = mul_checked(rm.m2, up1, "M2 * (U(SM1) + a2)")?;
        let up2 = add_checked(self.upsamplers[3].forward(b, sm2), crop.a3, "U(SM2) + a3")?;
        let sm3 = mul_checked(rm.m3, up2, "M3 * (U(SM2) + a3)")?;
        Ok(FusionMaps { sm1, sm2, sm3 })
    }

    fn check_channels(&self, m: FeatureMap<'_>) -> Result<()> {
        if m.channels() != self.dim {
            return Err(Error::shape(format!("map has {} channels, SAME expects {}", m.channels(), self.dim)));
        }
        Ok(())
    }

    /// The full module on precomputed crops.
    pub fn forward_crop<'t>(&self, b: &Binding<'t>, mask: Var<'t>, crop: RoiAttentionCrop<'t>) -> Result<SameOutput<'t>> {
        let d1 = self.mask_transformer_encode(b, mask)?;
        let refined = self.hierarchical_embed(b, d1, &crop)?;
        let fusion = self.fuse_attention_masks(b, &refined, &crop)?;
        Ok(SameOutput { crop, refined, fusion })
    }

    /// Crops the attention features over `bbox` and runs the module.
    pub fn forward<'t>(&self, b: &Binding<'t>, feats: &SoftAttentionFeatures<'t>, bbox: Var<'t>, mask: Var<'t>) -> Result<SameOutput<'t>> {
        let crop = roi_crop_attention(feats, bbox, self.config.roi_size)?;
        self.forward_crop(b, mask, crop)
    }
}
