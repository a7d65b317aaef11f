//! The assembled text spotter: backbone, attention encoder, dense head,
//! mask head, SAME and recognizer.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn_encoder::{AttnEncoder, EncoderConfig, SoftAttentionFeatures};
use crate::autodiff::{Tape, Var};
use crate::backbone::{image_input, Backbone, BackboneConfig, FeaturePyramid, STEM_STRIDE};
use crate::datagen::{Image, SceneSample, TextInstanceGt};
use crate::error::{Error, Result};
use crate::evalkit::geometry::{bounds, convex_hull, rectangle, Point};
use crate::evalkit::Prediction;
use crate::heads::detection::box_rows;
use crate::heads::losses::{giou_loss, l1_loss, mask_loss, recognition_loss, sigmoid_focal_loss, Lambdas, LossVars};
use crate::heads::{
    dense_targets, encode_target, mask_target, match_proposals_to_gt, propose_gt_guided, propose_learned, DenseHead, DenseHeadConfig,
    DenseOutput, MaskHead, MaskHeadConfig, Proposal, ProposalMode, RecognitionOutput, Recognizer, RecognizerConfig, RoiBox,
};
use crate::nn::{Binding, FeatureMap, ParamBuilder, ParamStore};
use crate::same::{stop_gradient_gate, Same, SameConfig, SameOutput};
use crate::tensor::Tensor;

/// Stride of P3, where the dense head and the mask head operate.
pub const P3_STRIDE: f64 = STEM_STRIDE as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub top_k: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Mask probability above which a cell belongs to the text polygon.
    pub mask_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            score_threshold: 0.3,
            nms_iou: 0.3,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub same: SameConfig,
    pub dense_head: DenseHeadConfig,
    pub mask_head: MaskHeadConfig,
    pub recognizer: RecognizerConfig,
    pub inference: InferenceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small model that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_dims: [32, 64, 128],
                depths: [2, 2, 2],
                window: 4,
                heads: 4,
                mlp_ratio: 2,
                fpn_dim: 32,
            },
            encoder: EncoderConfig {
                layers: 1,
                heads: 4,
                ffn_dim: 64,
                ..EncoderConfig::default()
            },
            same: SameConfig {
                roi_size: 8,
                mask_layers: 1,
                heads: 4,
                ffn_dim: 64,
                ..SameConfig::default()
            },
            dense_head: DenseHeadConfig::default(),
            mask_head: MaskHeadConfig::default(),
            recognizer: RecognizerConfig {
                ffn_dim: 64,
                ..RecognizerConfig::default()
            },
            inference: InferenceConfig::default(),
        }
    }

    /// The published architecture sizes. Documented, not meant for CPU runs.
    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_dims: [192, 384, 768],
                depths: [2, 6, 2],
                window: 7,
                heads: 8,
                mlp_ratio: 4,
                fpn_dim: 256,
            },
            encoder: EncoderConfig {
                layers: 6,
                heads: 8,
                ffn_dim: 1024,
                max_tokens: 1 << 16,
                joint: false,
            },
            same: SameConfig {
                roi_size: 16,
                mask_layers: 2,
                heads: 8,
                ffn_dim: 1024,
                ..SameConfig::default()
            },
            dense_head: DenseHeadConfig::default(),
            mask_head: MaskHeadConfig { conv_layers: 4 },
            recognizer: RecognizerConfig {
                max_len: 25,
                heads: 8,
                ffn_dim: 1024,
                ..RecognizerConfig::default()
            },
            inference: InferenceConfig {
                top_k: 100,
                ..InferenceConfig::default()
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.backbone.fpn_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambdas: Lambdas,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub proposals: ProposalMode,
    /// Relative side jitter of ground-truth-guided proposals.
    pub jitter: f64,
    pub match_iou: f64,
    pub optimal_matching: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            proposals: ProposalMode::GtGuided,
            jitter: 0.05,
            match_iou: 0.5,
            optimal_matching: false,
        }
    }
}

/// Range of every element of M1..M3 seen in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub min: f64,
    pub max: f64,
    pub elements: usize,
    /// Elements outside the open interval (0, 1).
    pub violations: usize,
}

impl Default for MaskStats {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            elements: 0,
            violations: 0,
        }
    }
}

impl MaskStats {
    pub fn observe(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            if !(v > 0.0 && v < 1.0) {
                self.violations += 1;
            }
        }
        self.elements += values.len();
    }

    pub fn merge(&mut self, other: &MaskStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.elements += other.elements;
        self.violations += other.violations;
    }

    fn observe_same(&mut self, out: &SameOutput<'_>) {
        for m in [out.refined.m1, out.refined.m2, out.refined.m3] {
            self.observe(m.data.value().data());
        }
    }
}

/// Image-level features shared by every instance.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures<'t> {
    pub image: FeatureMap<'t>,
    pub pyramid: FeaturePyramid<'t>,
    pub attention: SoftAttentionFeatures<'t>,
    pub dense: DenseOutput<'t>,
}

/// Everything computed for one box.
pub struct InstanceForward<'t> {
    pub bbox: Var<'t>,
    pub mask_logits: FeatureMap<'t>,
    pub same: SameOutput<'t>,
    /// SM3 after the stop-gradient gate.
    pub gated_sm3: FeatureMap<'t>,
    pub recognition: RecognitionOutput<'t>,
}

/// Losses for one sample.
pub struct SampleLoss<'t> {
    pub losses: LossVars<'t>,
    pub mask_stats: MaskStats,
    pub instances: usize,
}

/// Per-instance inference result with the intermediate maps used for
/// overlays.
#[derive(Clone, Debug)]
pub struct InstanceResult {
    pub bbox: RoiBox,
    pub score: f64,
    pub polygon: Vec<Point>,
    pub transcription: String,
    pub confidence: f64,
    /// Sigmoid of the mask head, `S x S`.
    pub initial_mask: Tensor,
    /// Channel means of M1, M2, M3 at `S`, `2S`, `4S`.
    pub refined: [Tensor; 3],
    /// Channel mean of SM3 at `4S`.
    pub sm3: Tensor,
}

impl InstanceResult {
    pub fn prediction(&self) -> Prediction {
        Prediction {
            polygon: self.polygon.clone(),
            transcription: self.transcription.clone(),
            confidence: self.confidence,
        }
    }
}

fn channel_mean(map: FeatureMap<'_>) -> Tensor {
    let c = map.channels();
    let v = map.data.value();
    let data = v.data().chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect();
    Tensor::from_vec([map.h, map.w], data)
}

/// Convex hull of the cells of a `side x side` probability grid above
/// `threshold`, mapped into `bbox`. Falls back to the box itself.
pub fn mask_polygon(probs: &[f64], side: usize, bbox: &RoiBox, threshold: f64) -> Vec<Point> {
    let (cw, ch) = ((bbox[2] - bbox[0]) / side as f64, (bbox[3] - bbox[1]) / side as f64);
    let mut corners = Vec::new();
    for (cell, &p) in probs.iter().enumerate() {
        if p <= threshold {
            continue;
        }
        let (i, j) = ((cell / side) as f64, (cell % side) as f64);
        for (di, dj) in [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)] {
            corners.push([bbox[0] + (j + dj) * cw, bbox[1] + (i + di) * ch]);
        }
    }
    let hull = convex_hull(&corners);
    if hull.len() < 3 {
        rectangle(bbox[0], bbox[1], bbox[2], bbox[3])
    } else {
        hull
    }
}

#[derive(Clone, Debug)]
pub struct TextSpotter {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub encoder: AttnEncoder,
    pub dense_head: DenseHead,
    pub mask_head: MaskHead,
    pub same: Same,
    pub recognizer: Recognizer,
}

impl TextSpotter {
    /// Builds the model and initializes its parameters from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = config.dim();
        let model = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, "");
            Self {
                config: config.clone(),
                backbone: Backbone::new(&mut pb.sub("backbone"), &config.backbone)?,
                encoder: AttnEncoder::new(&mut pb.sub("attn_encoder"), dim, &config.encoder)?,
                dense_head: DenseHead::new(&mut pb.sub("heads.dense"), dim, &config.dense_head),
                mask_head: MaskHead::new(
                    &mut pb.sub("heads.mask"),
                    dim,
                    config.same.mask_channels,
                    config.same.roi_size,
                    &config.mask_head,
                ),
                same: Same::new(&mut pb.sub("same"), dim, &config.same)?,
                recognizer: Recognizer::new(&mut pb.sub("heads.rec"), dim, &config.recognizer)?,
            }
        };
        Ok((model, store))
    }

    pub fn image_features<'t>(&self, b: &Binding<'t>, image: &Image) -> Result<ImageFeatures<'t>> {
        let input = image_input(b.tape(), image);
        let pyramid = self.backbone.forward(b, input)?;
        let attention = self.encoder.encode_pyramid(b, &pyramid)?;
        let dense = self.dense_head.forward(b, pyramid.p3, P3_STRIDE);
        Ok(ImageFeatures {
            image: input,
            pyramid,
            attention,
            dense,
        })
    }

    /// Mask head, SAME and recognizer for one box.
    pub fn instance_forward<'t>(&self, b: &Binding<'t>, f: &ImageFeatures<'t>, bbox: RoiBox, gradient_block: bool) -> Result<InstanceForward<'t>> {
        let bbox = b.tape().constant(Tensor::from_vec([4], bbox.to_vec()));
        let mask_logits = self.mask_head.forward(b, f.attention.f3, bbox, P3_STRIDE);
        let same = self.same.forward(b, &f.attention, bbox, mask_logits.data)?;
        let gated_sm3 = stop_gradient_gate(same.fusion.sm3, gradient_block);
        let side = 4 * self.config.same.roi_size;
        let p3 = f.pyramid.p3;
        let roi = FeatureMap::new(p3.data.roi_align((p3.h, p3.w), bbox, (side, side), P3_STRIDE), side, side);
        let input = self.recognizer.input(b, roi, gated_sm3, Some(f.image), bbox)?;
        let recognition = self.recognizer.forward(b, input)?;
        Ok(InstanceForward {
            bbox,
            mask_logits,
            same,
            gated_sm3,
            recognition,
        })
    }

    fn training_proposals(&self, f: &ImageFeatures<'_>, gts: &[TextInstanceGt], cfg: &LossConfig, size: (usize, usize), rng: &mut impl Rng) -> Vec<Proposal> {
        match cfg.proposals {
            ProposalMode::GtGuided => propose_gt_guided(gts, cfg.jitter, size, rng),
            ProposalMode::Learned => {
                let inf = &self.config.inference;
                propose_learned(&f.dense.scores(), &f.dense.boxes.value(), inf.top_k, 0.0, Some(inf.nms_iou), size)
            }
        }
    }

    /// Differentiable losses of one sample.
    pub fn sample_loss<'t>(
        &self,
        b: &Binding<'t>,
        sample: &SceneSample,
        cfg: &LossConfig,
        gradient_block: bool,
        rng: &mut impl Rng,
    ) -> Result<SampleLoss<'t>> {
        let tape = b.tape();
        let img = &sample.image;
        let f = self.image_features(b, img)?;
        let d = f.dense;
        let targets = dense_targets(d.h, d.w, d.stride, &sample.instances);

        let kept: Vec<usize> = (0..targets.labels.len()).filter(|&c| !targets.ignored[c]).collect();
        let kept_labels: Vec<bool> = kept.iter().map(|&c| targets.labels[c]).collect();
        let kept_idx: Rc<[usize]> = kept.iter().copied().collect();
        let cls = sigmoid_focal_loss(d.logits.gather(kept_idx, [kept.len()]), &kept_labels, cfg.focal_alpha, cfg.focal_gamma);

        let zero = || tape.constant(Tensor::scalar(0.0));
        let (giou, l1) = if targets.positives.is_empty() {
            (zero(), zero())
        } else {
            let cells: Vec<usize> = targets.positives.iter().map(|p| p.0).collect();
            let n = cells.len();
            let pred = d.boxes.gather(box_rows(&cells), [n, 4]);
            let gt: Vec<f64> = targets
                .positives
                .iter()
                .flat_map(|&(_, g)| bounds(&sample.instances[g].polygon))
                .collect();
            let gt = tape.constant(Tensor::from_vec([n, 4], gt));
            (giou_loss(pred, gt)?, l1_loss(pred, gt, img.width as f64, img.height as f64))
        };

        let legible: Vec<usize> = (0..sample.instances.len()).filter(|&i| sample.instances[i].legible).collect();
        let gt_boxes: Vec<RoiBox> = legible.iter().map(|&i| bounds(&sample.instances[i].polygon)).collect();
        let proposals = self.training_proposals(&f, &sample.instances, cfg, (img.width, img.height), rng);
        let prop_boxes: Vec<RoiBox> = proposals.iter().map(|p| p.bbox).collect();
        let assignment = match_proposals_to_gt(&prop_boxes, &gt_boxes, cfg.match_iou, cfg.optimal_matching)?;

        let mut stats = MaskStats::default();
        let mut mask_terms = Vec::new();
        let mut rec_terms = Vec::new();
        let s = self.config.same.roi_size;
        let rc = &self.config.recognizer;
        for (p, gi) in assignment.iter().enumerate() {
            let Some(gi) = *gi else { continue };
            let gt = &sample.instances[legible[gi]];
            let bbox = prop_boxes[p];
            let inst = self.instance_forward(b, &f, bbox, gradient_block)?;
            stats.observe_same(&inst.same);
            mask_terms.push(mask_loss(inst.mask_logits.data, &mask_target(&gt.polygon, &bbox, s)));
            let target = encode_target(&gt.transcription, rc.max_len, rc.strict_length)?;
            rec_terms.push(recognition_loss(inst.recognition.log_probs, &target)?);
        }
        let mean = |terms: &[Var<'t>]| {
            if terms.is_empty() {
                zero()
            } else {
                terms.iter().skip(1).fold(terms[0], |acc, t| acc.add(*t)).scale(1.0 / terms.len() as f64)
            }
        };
        Ok(SampleLoss {
            losses: LossVars {
                cls,
                giou,
                l1,
                mask: mean(&mask_terms),
                rec: mean(&rec_terms),
            },
            mask_stats: stats,
            instances: mask_terms.len(),
        })
    }

    /// Per-sample losses averaged over the batch, component by component.
    pub fn batch_loss<'t>(
        &self,
        b: &Binding<'t>,
        batch: &[&SceneSample],
        cfg: &LossConfig,
        gradient_block: bool,
        rng: &mut impl Rng,
    ) -> Result<(LossVars<'t>, MaskStats)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut stats = MaskStats::default();
        let mut parts = Vec::with_capacity(batch.len());
        for s in batch {
            let l = self.sample_loss(b, s, cfg, gradient_block, rng)?;
            stats.merge(&l.mask_stats);
            parts.push(l.losses);
        }
        let k = 1.0 / batch.len() as f64;
        let avg = |pick: fn(&LossVars<'t>) -> Var<'t>| parts.iter().skip(1).fold(pick(&parts[0]), |a, p| a.add(pick(p))).scale(k);
        Ok((
            LossVars {
                cls: avg(|l| l.cls),
                giou: avg(|l| l.giou),
                l1: avg(|l| l.l1),
                mask: avg(|l| l.mask),
                rec: avg(|l| l.rec),
            },
            stats,
        ))
    }

    /// Detects and reads every text instance of an image.
    pub fn infer(&self, store: &ParamStore, image: &Image) -> Result<Vec<InstanceResult>> {
        let tape = Tape::new();
        let b = Binding::frozen(&tape, store);
        let f = self.image_features(&b, image)?;
        let inf = &self.config.inference;
        let proposals = propose_learned(
            &f.dense.scores(),
            &f.dense.boxes.value(),
            inf.top_k,
            inf.score_threshold,
            Some(inf.nms_iou),
            (image.width, image.height),
        );
        let s = self.config.same.roi_size;
        proposals
            .iter()
            .map(|p| {
                let inst = self.instance_forward(&b, &f, p.bbox, false)?;
                let initial: Vec<f64> = inst.mask_logits.data.value().data().chunks(self.config.same.mask_channels)
                    .map(|c| 1.0 / (1.0 + (-c.iter().sum::<f64>() / c.len() as f64).exp()))
                    .collect();
                let (transcription, confidence) = inst.recognition.decode();
                let r = &inst.same.refined;
                Ok(InstanceResult {
                    bbox: p.bbox,
                    score: p.score,
                    polygon: mask_polygon(&initial, s, &p.bbox, inf.mask_threshold),
                    transcription,
                    confidence: confidence * p.score,
                    initial_mask: Tensor::from_vec([s, s], initial),
                    refined: [channel_mean(r.m1), channel_mean(r.m2), channel_mean(r.m3)],
                    sm3: channel_mean(inst.same.fusion.sm3),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_polygon_covers_positive_cells() {
        let mut probs = vec![0.0; 16];
        probs[5] = 0.9;
        probs[6] = 0.9;
        let poly = mask_polygon(&probs, 4, &[0.0, 0.0, 40.0, 40.0], 0.5);
        let bb = bounds(&poly);
        assert_eq!(bb, [10.0, 10.0, 30.0, 20.0]);
        assert_eq!(mask_polygon(&[0.0; 16], 4, &[0.0, 0.0, 4.0, 4.0], 0.5).len(), 4);
    }

    #[test]
    fn mask_stats_count_violations() {
        let mut s = MaskStats::default();
        s.observe(&[0.5, 1.0, 0.0, 0.2]);
        assert_eq!((s.violations, s.elements), (2, 4));
    }
}
