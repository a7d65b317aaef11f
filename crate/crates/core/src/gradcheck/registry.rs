//! Named differentiable operations checked by the `gradcheck` command.
//!
//! Every entry builds a tiny instance of a module with perturbed parameters
//! and checks gradients with respect to its inputs and its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck_sampled, GradcheckReport};
use crate::attn_encoder::{AttnEncoder, EncoderConfig, SoftAttentionFeatures};
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid, Fpn, Stage, StageFeatures, WindowBlock};
use crate::datagen::{synthesize_sample, GenConfig};
use crate::error::Result;
use crate::heads::losses::{
    focal_loss, giou_loss, l1_loss, mask_loss, recognition_loss, sigmoid_focal_loss, Lambdas, LossVars,
};
use crate::heads::{DenseHead, DenseHeadConfig, MaskHead, MaskHeadConfig, Recognizer, RecognizerConfig};
use crate::model::{LossConfig, ModelConfig, TextSpotter};
use crate::nn::{Binding, FeatureMap, ParamBuilder, ParamStore};
use crate::same::{roi_crop_attention, RoiAttentionCrop, Same, SameConfig};
use crate::tensor::Tensor;

/// Coordinates sampled per input tensor.
const PER_INPUT: usize = 6;

pub struct RegisteredOp {
    pub module: &'static str,
    pub name: &'static str,
    check: fn(f64) -> Result<GradcheckReport>,
}

impl RegisteredOp {
    pub fn run(&self, epsilon: f64) -> Result<GradcheckReport> {
        (self.check)(epsilon)
    }
}

pub struct OpOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub report: Result<GradcheckReport>,
}

impl OpOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.as_ref().is_ok_and(|r| r.passed(tolerance))
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Builds a module and returns it with its parameters, each nudged by
/// uniform noise so that zero-initialized biases are exercised too.
fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<M>) -> Result<(M, Vec<Tensor>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng, ""))?;
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = store
        .iter()
        .map(|(_, t)| {
            let n = Tensor::uniform(t.shape().to_vec(), -0.1, 0.1, &mut noise);
            let data = t.data().iter().zip(n.data()).map(|(a, b)| a + b).collect();
            Tensor::from_vec(t.shape().to_vec(), data)
        })
        .collect();
    Ok((m, params))
}

/// Checks `f` with respect to `inputs` followed by every module parameter.
fn check<M, F>(module: &M, params: Vec<Tensor>, inputs: Vec<Tensor>, epsilon: f64, f: F) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&M, &Binding<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = inputs.len();
    {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().chain(&params).map(|t| tape.constant(t.clone())).collect();
        f(module, &Binding::from_vars(&tape, vars[n..].to_vec()), &vars[..n])?;
    }
    let all: Vec<Tensor> = inputs.into_iter().chain(params).collect();
    gradcheck_sampled(
        |tape: &Tape, v: &[Var<'_>]| {
            let b = Binding::from_vars(tape, v[n..].to_vec());
            f(module, &b, &v[..n]).expect("forward succeeded once already")
        },
        &all,
        epsilon,
        Some(PER_INPUT),
    )
}

fn flat<'t>(maps: &[FeatureMap<'t>]) -> Var<'t> {
    let parts: Vec<Var<'t>> = maps.iter().map(|m| m.data.reshape([m.data.numel()])).collect();
    Var::concat_rows(&parts)
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_dims: [8, 8, 8],
        depths: [2, 1, 1],
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        fpn_dim: 8,
    }
}

fn pyramid_flat<'t>(p: &FeaturePyramid<'t>) -> Var<'t> {
    flat(&[p.p3, p.p4, p.p5])
}

fn window_block(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(1, |pb| Ok(WindowBlock::new(pb, 8, 2, 2, 2, true)))?;
    check(&m, p, vec![rand(&[16, 8], 2)], eps, |m, b, x| Ok(m.forward(b, FeatureMap::new(x[0], 4, 4)).data))
}

fn stage_merge(eps: f64) -> Result<GradcheckReport> {
    let cfg = tiny_backbone();
    let (m, p) = build(3, |pb| Ok(Stage::new(pb, &cfg, 1)))?;
    check(&m, p, vec![rand(&[16, 8], 4)], eps, |m, b, x| Ok(m.forward(b, FeatureMap::new(x[0], 4, 4))?.data))
}

fn fpn(eps: f64) -> Result<GradcheckReport> {
    let cfg = tiny_backbone();
    let (m, p) = build(5, |pb| Ok(Fpn::new(pb, &cfg)))?;
    let inputs = vec![rand(&[16, 8], 6), rand(&[4, 8], 7), rand(&[1, 8], 8)];
    check(&m, p, inputs, eps, |m, b, x| {
        let s = StageFeatures {
            c3: FeatureMap::new(x[0], 4, 4),
            c4: FeatureMap::new(x[1], 2, 2),
            c5: FeatureMap::new(x[2], 1, 1),
        };
        Ok(pyramid_flat(&m.fuse(b, &s)?))
    })
}

fn backbone_full(eps: f64) -> Result<GradcheckReport> {
    let cfg = tiny_backbone();
    let (m, p) = build(9, |pb| Backbone::new(pb, &cfg))?;
    let img = rand(&[32 * 32, 3], 10).map(|x| 0.5 + 0.5 * x);
    check(&m, p, vec![img], eps, |m, b, x| Ok(pyramid_flat(&m.forward(b, FeatureMap::new(x[0], 32, 32))?)))
}

fn encoder_cfg(joint: bool) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_tokens: 64,
        joint,
    }
}

fn encode_level(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(11, |pb| AttnEncoder::new(pb, 8, &encoder_cfg(false)))?;
    check(&m, p, vec![rand(&[9, 8], 12)], eps, |m, b, x| Ok(m.encode_level(b, FeatureMap::new(x[0], 3, 3))?.data))
}

fn encode_pyramid_joint(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(13, |pb| AttnEncoder::new(pb, 8, &encoder_cfg(true)))?;
    let inputs = vec![rand(&[16, 8], 14), rand(&[4, 8], 15), rand(&[1, 8], 16)];
    check(&m, p, inputs, eps, |m, b, x| {
        let pyr = FeaturePyramid {
            p3: FeatureMap::new(x[0], 4, 4),
            p4: FeatureMap::new(x[1], 2, 2),
            p5: FeatureMap::new(x[2], 1, 1),
        };
        let f = m.encode_pyramid(b, &pyr)?;
        Ok(flat(&[f.f1, f.f2, f.f3]))
    })
}

fn same_cfg(positional: bool) -> SameConfig {
    SameConfig {
        roi_size: 2,
        mask_channels: 1,
        mask_layers: 1,
        heads: 1,
        ffn_dim: 8,
        mask_positional: positional,
        ..SameConfig::default()
    }
}

/// f1..f3 of a 64 x 64 image at `c` channels, a box and `S = 2` mask logits.
fn same_inputs(c: usize, seed: u64) -> Vec<Tensor> {
    vec![
        rand(&[4, c], seed),
        rand(&[16, c], seed + 1),
        rand(&[64, c], seed + 2),
        Tensor::from_vec([4], vec![10.3, 12.7, 41.1, 50.2]),
        rand(&[4, 1], seed + 3),
    ]
}

fn feats<'t>(x: &[Var<'t>]) -> SoftAttentionFeatures<'t> {
    SoftAttentionFeatures {
        f1: FeatureMap::new(x[0], 2, 2),
        f2: FeatureMap::new(x[1], 4, 4),
        f3: FeatureMap::new(x[2], 8, 8),
    }
}

fn crop_inputs<'t>(x: &[Var<'t>], s: usize) -> RoiAttentionCrop<'t> {
    RoiAttentionCrop {
        a1: FeatureMap::new(x[0], s, s),
        a2: FeatureMap::new(x[1], 2 * s, 2 * s),
        a3: FeatureMap::new(x[2], 4 * s, 4 * s),
    }
}

fn roi_crop(eps: f64) -> Result<GradcheckReport> {
    let mut inputs = same_inputs(3, 20);
    inputs.truncate(4);
    check(&(), vec![], inputs, eps, |_, _, x| {
        let c = roi_crop_attention(&feats(x), x[3], 2)?;
        Ok(flat(&[c.a1, c.a2, c.a3]))
    })
}

fn mask_encode(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(21, |pb| Same::new(pb, 4, &same_cfg(true)))?;
    check(&m, p, vec![rand(&[4, 1], 22)], eps, |m, b, x| Ok(m.mask_transformer_encode(b, x[0])?.data))
}

fn hierarchical_embed(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(23, |pb| Same::new(pb, 4, &same_cfg(true)))?;
    let inputs = vec![rand(&[4, 4], 24), rand(&[16, 4], 25), rand(&[64, 4], 26), rand(&[4, 4], 27)];
    check(&m, p, inputs, eps, |m, b, x| {
        let crop = crop_inputs(x, 2);
        let r = m.hierarchical_embed(b, FeatureMap::new(x[3], 2, 2), &crop)?;
        Ok(flat(&[r.d2, r.d3, r.m1, r.m2, r.m3]))
    })
}

fn fuse_masks(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(28, |pb| Same::new(pb, 4, &same_cfg(true)))?;
    let inputs = vec![rand(&[4, 4], 29), rand(&[16, 4], 30), rand(&[64, 4], 31), rand(&[4, 4], 32)];
    check(&m, p, inputs, eps, |m, b, x| {
        let crop = crop_inputs(x, 2);
        let r = m.hierarchical_embed(b, FeatureMap::new(x[3], 2, 2), &crop)?;
        let f = m.fuse_attention_masks(b, &r, &crop)?;
        Ok(flat(&[f.sm1, f.sm2, f.sm3]))
    })
}

fn same_full(c: usize, positional: bool, seed: u64, eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(seed, |pb| Same::new(pb, c, &same_cfg(positional)))?;
    check(&m, p, same_inputs(c, seed + 1), eps, |m, b, x| {
        let out = m.forward(b, &feats(x), x[3], x[4])?;
        let r = out.refined;
        let f = out.fusion;
        Ok(flat(&[r.m1, r.m2, r.m3, f.sm1, f.sm2, f.sm3]))
    })
}

fn same_full_c2(eps: f64) -> Result<GradcheckReport> {
    same_full(2, false, 40, eps)
}

fn same_full_c4(eps: f64) -> Result<GradcheckReport> {
    same_full(4, true, 45, eps)
}

fn dense_head(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(50, |pb| Ok(DenseHead::new(pb, 4, &DenseHeadConfig::default())))?;
    check(&m, p, vec![rand(&[16, 4], 51)], eps, |m, b, x| {
        let d = m.forward(b, FeatureMap::new(x[0], 4, 4), 8.0);
        Ok(Var::concat_rows(&[d.logits, d.boxes.reshape([64])]))
    })
}

fn mask_head(eps: f64) -> Result<GradcheckReport> {
    let (m, p) = build(52, |pb| Ok(MaskHead::new(pb, 4, 1, 4, &MaskHeadConfig::default())))?;
    let inputs = vec![rand(&[64, 4], 53), Tensor::from_vec([4], vec![9.4, 14.2, 47.9, 33.3])];
    check(&m, p, inputs, eps, |m, b, x| Ok(m.forward(b, FeatureMap::new(x[0], 8, 8), x[1], 8.0).data))
}

fn recognizer(eps: f64) -> Result<GradcheckReport> {
    let cfg = RecognizerConfig {
        max_len: 3,
        heads: 2,
        ffn_dim: 8,
        context_layers: 1,
        decoder_layers: 1,
        image_crop: true,
        strict_length: false,
    };
    let (m, p) = build(54, |pb| Recognizer::new(pb, 4, &cfg))?;
    let inputs = vec![
        rand(&[16, 4], 55),
        rand(&[16, 4], 56),
        rand(&[256, 3], 57).map(|v| 0.5 + 0.5 * v),
        Tensor::from_vec([4], vec![2.2, 3.1, 11.7, 9.6]),
    ];
    check(&m, p, inputs, eps, |m, b, x| {
        let input = m.input(
            b,
            FeatureMap::new(x[0], 4, 4),
            FeatureMap::new(x[1], 4, 4),
            Some(FeatureMap::new(x[2], 16, 16)),
            x[3],
        )?;
        Ok(m.forward(b, input)?.log_probs)
    })
}

fn focal(eps: f64) -> Result<GradcheckReport> {
    let p = rand(&[6], 60).map(|v| 0.5 + 0.4 * v);
    check(&(), vec![], vec![p], eps, |_, _, x| Ok(focal_loss(x[0], 0.25, 2.0)))
}

fn sigmoid_focal(eps: f64) -> Result<GradcheckReport> {
    check(&(), vec![], vec![rand(&[6], 61).map(|v| 3.0 * v)], eps, |_, _, x| {
        Ok(sigmoid_focal_loss(x[0], &[true, false, false, true, false, true], 0.25, 2.0))
    })
}

fn giou(eps: f64) -> Result<GradcheckReport> {
    let pred = Tensor::from_vec([2, 4], vec![0.0, 0.5, 2.0, 3.0, 5.0, 5.0, 6.0, 7.0]);
    let gt = Tensor::from_vec([2, 4], vec![1.0, 1.0, 3.0, 2.5, 2.0, 2.0, 3.0, 4.0]);
    check(&(), vec![], vec![pred, gt], eps, |_, _, x| giou_loss(x[0], x[1]))
}

fn l1(eps: f64) -> Result<GradcheckReport> {
    let a = rand(&[3, 4], 62);
    let b = a.map(|v| v + if v > 0.0 { 0.3 } else { -0.4 });
    check(&(), vec![], vec![a, b], eps, |_, _, x| Ok(l1_loss(x[0], x[1], 64.0, 32.0)))
}

fn mask_bce(eps: f64) -> Result<GradcheckReport> {
    let target = rand(&[16], 63).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    check(&(), vec![], vec![rand(&[16, 1], 64).map(|v| 2.0 * v)], eps, move |_, _, x| Ok(mask_loss(x[0], &target)))
}

fn rec_nll(eps: f64) -> Result<GradcheckReport> {
    check(&(), vec![], vec![rand(&[4, 5], 65)], eps, |_, _, x| recognition_loss(x[0].log_softmax(), &[2, 0, 4]))
}

fn joint(eps: f64) -> Result<GradcheckReport> {
    let inputs = (0..5).map(|i| rand(&[1], 70 + i).map(|v| v.abs() + 0.1)).collect();
    let lambdas = Lambdas {
        giou: 1.5,
        l1: 0.7,
        mask: 2.5,
        rec: 0.3,
    };
    check(&(), vec![], inputs, eps, move |_, _, x| {
        let l = LossVars {
            cls: x[0].sum(),
            giou: x[1].sum(),
            l1: x[2].sum(),
            mask: x[3].sum(),
            rec: x[4].sum(),
        };
        Ok(l.joint(&lambdas))
    })
}

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.backbone = BackboneConfig {
        stage_dims: [8, 8, 16],
        depths: [1, 1, 1],
        window: 4,
        heads: 2,
        mlp_ratio: 1,
        fpn_dim: 8,
    };
    cfg.encoder.heads = 2;
    cfg.encoder.ffn_dim = 8;
    cfg.same = SameConfig {
        roi_size: 2,
        heads: 2,
        ffn_dim: 8,
        mask_layers: 1,
        ..SameConfig::default()
    };
    cfg.recognizer.max_len = 4;
    cfg.recognizer.heads = 2;
    cfg.recognizer.ffn_dim = 8;
    cfg.recognizer.decoder_layers = 1;
    cfg
}

/// The joint training loss of a tiny model on one synthetic 64 x 64 sample.
fn model_joint_loss(eps: f64) -> Result<GradcheckReport> {
    let cfg = tiny_model();
    let (model, store) = TextSpotter::new(&cfg, 80)?;
    let gen = GenConfig {
        width: 64,
        height: 64,
        instances: (1, 2),
        glyph_height: (10, 12),
        word_length: (2, 3),
        ..GenConfig::default()
    };
    let sample = synthesize_sample(&gen, 81)?;
    let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let loss = LossConfig {
        jitter: 0.0,
        ..LossConfig::default()
    };
    check(&model, params, vec![], eps, move |m, b, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = m.sample_loss(b, &sample, &loss, false, &mut rng)?;
        Ok(l.losses.joint(&loss.lambdas))
    })
}

/// Every registered operation, grouped by module.
pub fn registered_ops() -> Vec<RegisteredOp> {
    macro_rules! op {
        ($module:literal, $name:literal, $f:ident) => {
            RegisteredOp {
                module: $module,
                name: $name,
                check: $f,
            }
        };
    }
    vec![
        op!("backbone", "window_block_shifted", window_block),
        op!("backbone", "stage_patch_merge", stage_merge),
        op!("backbone", "fpn_fuse", fpn),
        op!("backbone", "backbone_forward", backbone_full),
        op!("attn_encoder", "encode_level", encode_level),
        op!("attn_encoder", "encode_pyramid_joint", encode_pyramid_joint),
        op!("same", "roi_crop_attention", roi_crop),
        op!("same", "mask_transformer_encode", mask_encode),
        op!("same", "hierarchical_embed", hierarchical_embed),
        op!("same", "fuse_attention_masks", fuse_masks),
        op!("same", "same_forward_c2", same_full_c2),
        op!("same", "same_forward_c4_positional", same_full_c4),
        op!("heads", "dense_head", dense_head),
        op!("heads", "mask_head", mask_head),
        op!("heads", "recognizer", recognizer),
        op!("heads", "focal_loss", focal),
        op!("heads", "sigmoid_focal_loss", sigmoid_focal),
        op!("heads", "giou_loss", giou),
        op!("heads", "l1_loss", l1),
        op!("heads", "mask_loss", mask_bce),
        op!("heads", "recognition_loss", rec_nll),
        op!("heads", "joint_loss", joint),
        op!("heads", "model_joint_loss", model_joint_loss),
    ]
}

pub fn run_all(epsilon: f64) -> Vec<OpOutcome> {
    registered_ops()
        .into_iter()
        .map(|op| OpOutcome {
            module: op.module,
            name: op.name,
            report: op.run(epsilon),
        })
        .collect()
}

/// Fixed-width pass/fail table.
pub fn format_table(outcomes: &[OpOutcome], tolerance: f64) -> String {
    let mut out = format!("{:<14} {:<28} {:>6} {:>12}  status\n", "module", "operation", "coords", "max rel err");
    for o in outcomes {
        let line = match &o.report {
            Ok(r) => {
                let mut status = if r.passed(tolerance) { "pass".to_string() } else { "FAIL".to_string() };
                if !r.nondifferentiable.is_empty() {
                    status.push_str(&format!(" ({} non-differentiable)", r.nondifferentiable.len()));
                }
                format!("{:<14} {:<28} {:>6} {:>12.3e}  {status}\n", o.module, o.name, r.checked, r.max_rel_error)
            }
            Err(e) => format!("{:<14} {:<28} {:>6} {:>12}  FAIL ({e})\n", o.module, o.name, "-", "-"),
        };
        out.push_str(&line);
    }
    out
}
