//! Dense text/background head on P3, proposals, proposal matching and the
//! per-instance mask head.

use std::rc::Rc;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::datagen::TextInstanceGt;
use crate::error::{Error, Result};
use crate::evalkit::geometry::{bounds, contains, rasterize, Point};
use crate::evalkit::matching::{greedy_assign, optimal_assign};
use crate::nn::{Binding, Conv2d, FeatureMap, ParamBuilder};
use crate::tensor::Tensor;

/// Raw distance outputs are clamped to this magnitude before `exp`.
const MAX_LOG_DISTANCE: f64 = 6.0;

pub type RoiBox = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: RoiBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalMode {
    /// Top-scoring cells of the dense head.
    #[default]
    Learned,
    /// Jittered ground-truth boxes, for training only.
    GtGuided,
}

pub fn box_area(b: &RoiBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn box_iou(a: &RoiBox, b: &RoiBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn clip_box(b: &RoiBox, width: f64, height: f64) -> RoiBox {
    [b[0].clamp(0.0, width), b[1].clamp(0.0, height), b[2].clamp(0.0, width), b[3].clamp(0.0, height)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseHeadConfig {
    /// 3x3 conv layers shared by both outputs.
    pub tower_layers: usize,
    /// Initial foreground probability, used to set the classifier bias.
    pub prior: f64,
}

impl Default for DenseHeadConfig {
    fn default() -> Self {
        Self {
            tower_layers: 2,
            prior: 0.01,
        }
    }
}

/// Per-cell outputs of the dense head.
#[derive(Clone, Copy, Debug)]
pub struct DenseOutput<'t> {
    /// Text/background logits `[cells]`.
    pub logits: Var<'t>,
    /// Boxes `[cells, 4]` in image pixels.
    pub boxes: Var<'t>,
    pub h: usize,
    pub w: usize,
    pub stride: f64,
}

impl DenseOutput<'_> {
    pub fn scores(&self) -> Vec<f64> {
        self.logits.value().data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
    }

    pub fn box_at(&self, cell: usize) -> RoiBox {
        let v = self.boxes.value();
        let d = &v.data()[cell * 4..cell * 4 + 4];
        [d[0], d[1], d[2], d[3]]
    }
}

/// Cell centre in image pixels.
pub fn cell_center(cell: usize, w: usize, stride: f64) -> Point {
    [((cell % w) as f64 + 0.5) * stride, ((cell / w) as f64 + 0.5) * stride]
}

#[derive(Clone, Debug)]
pub struct DenseHead {
    pub tower: Vec<Conv2d>,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

impl DenseHead {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, cfg: &DenseHeadConfig) -> Self {
        let tower = (0..cfg.tower_layers)
            .map(|i| Conv2d::new(&mut pb.sub(&format!("tower{i}")), dim, dim, 3, 1, 1))
            .collect();
        let cls = {
            let mut sub = pb.sub("cls");
            let weight = sub.uniform("weight", &[dim, 1], dim);
            let bias = sub.constant("bias", &[1], -((1.0 - cfg.prior) / cfg.prior).ln());
            Conv2d {
                weight,
                bias,
                kernel: 1,
                stride: 1,
                padding: 0,
                in_ch: dim,
                out_ch: 1,
            }
        };
        Self {
            tower,
            cls,
            reg: Conv2d::new(&mut pb.sub("reg"), dim, 4, 1, 1, 0),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, p3: FeatureMap<'t>, stride: f64) -> DenseOutput<'t> {
        let mut x = p3;
        for conv in &self.tower {
            let y = conv.forward(b, x);
            x = y.with_data(y.data.gelu());
        }
        let n = x.h * x.w;
        let logits = self.cls.forward(b, x).data.reshape([n]);
        let raw = self.reg.forward(b, x).data;
        let tape = b.tape();
        let centers: Vec<f64> = (0..n)
            .flat_map(|c| {
                let [cx, cy] = cell_center(c, x.w, stride);
                [cx, cy, cx, cy]
            })
            .collect();
        let sign = tape.constant(Tensor::from_vec([4], vec![-1.0, -1.0, 1.0, 1.0]));
        let dist = raw.clamp(-MAX_LOG_DISTANCE, MAX_LOG_DISTANCE).exp().scale(stride);
        let boxes = dist.mul_row(sign).add(tape.constant(Tensor::from_vec([n, 4], centers)));
        DenseOutput {
            logits,
            boxes,
            h: x.h,
            w: x.w,
            stride,
        }
    }
}

/// Cell labels for the dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargets {
    pub labels: Vec<bool>,
    /// Cells inside a do-not-care region, left out of the classification loss.
    pub ignored: Vec<bool>,
    /// `(cell, gt index)` for every positive cell.
    pub positives: Vec<(usize, usize)>,
}

/// A cell is positive when its centre lies inside a legible polygon; the
/// smallest containing polygon wins. A legible instance that covers no
/// centre claims the cell under its box centre, if that cell is still free.
pub fn dense_targets(h: usize, w: usize, stride: f64, gts: &[TextInstanceGt]) -> DenseTargets {
    let n = h * w;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut ignored = vec![false; n];
    let areas: Vec<f64> = gts.iter().map(|g| crate::evalkit::geometry::area(&g.polygon)).collect();
    for (cell, slot) in owner.iter_mut().enumerate() {
        let p = cell_center(cell, w, stride);
        for (gi, gt) in gts.iter().enumerate() {
            if !contains(&gt.polygon, p) {
                continue;
            }
            if !gt.legible {
                ignored[cell] = true;
                continue;
            }
            if slot.is_none_or(|o| areas[gi] < areas[o]) {
                *slot = Some(gi);
            }
        }
    }
    for (gi, gt) in gts.iter().enumerate() {
        if !gt.legible || owner.contains(&Some(gi)) {
            continue;
        }
        let bb = bounds(&gt.polygon);
        let cx = (((bb[0] + bb[2]) / 2.0 / stride) as usize).min(w - 1);
        let cy = (((bb[1] + bb[3]) / 2.0 / stride) as usize).min(h - 1);
        let cell = cy * w + cx;
        if owner[cell].is_none() {
            owner[cell] = Some(gi);
        }
    }
    let mut positives = Vec::new();
    let mut labels = vec![false; n];
    for (cell, o) in owner.iter().enumerate() {
        if let Some(gi) = *o {
            labels[cell] = true;
            ignored[cell] = false;
            positives.push((cell, gi));
        }
    }
    DenseTargets {
        labels,
        ignored,
        positives,
    }
}

/// Top-`k` proposals from per-cell scores and boxes.
///
/// Cells are ranked by descending score, ties broken by row-major index.
/// Boxes are clipped to the image; boxes that collapse are dropped. With
/// `nms_iou`, a box overlapping a kept box above that IoU is suppressed.
pub fn propose_learned(
    scores: &[f64],
    boxes: &Tensor,
    k: usize,
    min_score: f64,
    nms_iou: Option<f64>,
    image_size: (usize, usize),
) -> Vec<Proposal> {
    let n = scores.len();
    assert_eq!(boxes.shape(), &[n, 4], "proposal boxes");
    let k = if k > n {
        warn!("requested {k} proposals from {n} cells; clipping to {n}");
        n
    } else {
        k
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (width, height) = (image_size.0 as f64, image_size.1 as f64);
    let mut kept: Vec<Proposal> = Vec::with_capacity(k);
    for cell in order {
        if kept.len() == k || scores[cell] < min_score {
            break;
        }
        let d = &boxes.data()[cell * 4..cell * 4 + 4];
        let bbox = clip_box(&[d[0], d[1], d[2], d[3]], width, height);
        if !(bbox[2] > bbox[0] && bbox[3] > bbox[1]) {
            continue;
        }
        if let Some(thr) = nms_iou {
            if kept.iter().any(|p| box_iou(&p.bbox, &bbox) > thr) {
                continue;
            }
        }
        kept.push(Proposal {
            bbox,
            score: scores[cell],
        });
    }
    kept
}

/// Ground-truth boxes with each side moved by up to `jitter` times the box
/// extent, clipped to the image. Do-not-care instances are skipped.
pub fn propose_gt_guided(gts: &[TextInstanceGt], jitter: f64, image_size: (usize, usize), rng: &mut impl Rng) -> Vec<Proposal> {
    let (width, height) = (image_size.0 as f64, image_size.1 as f64);
    gts.iter()
        .filter(|g| g.legible)
        .filter_map(|g| {
            let b = bounds(&g.polygon);
            let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
            let mut j = |extent: f64| {
                if jitter > 0.0 {
                    rng.random_range(-jitter..=jitter) * extent
                } else {
                    0.0
                }
            };
            let moved = [b[0] + j(bw), b[1] + j(bh), b[2] + j(bw), b[3] + j(bh)];
            let bbox = clip_box(&moved, width, height);
            (bbox[2] - bbox[0] >= 1.0 && bbox[3] - bbox[1] >= 1.0).then_some(Proposal { bbox, score: 1.0 })
        })
        .collect()
}

/// One-to-one matching of proposals to ground-truth boxes by IoU.
///
/// Returns the matched GT index per proposal; `None` is background. Greedy
/// order is descending IoU, then lower proposal index, then lower GT index.
pub fn match_proposals_to_gt(proposals: &[RoiBox], gts: &[RoiBox], iou_threshold: f64, optimal: bool) -> Result<Vec<Option<usize>>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidInput(format!("IoU threshold {iou_threshold} outside (0, 1)")));
    }
    let scores: Vec<Vec<f64>> = proposals.iter().map(|p| gts.iter().map(|g| box_iou(p, g)).collect()).collect();
    let pairs = if optimal {
        optimal_assign(&scores, iou_threshold)
    } else {
        greedy_assign(&scores, iou_threshold)
    };
    let mut out = vec![None; proposals.len()];
    for p in pairs {
        out[p.pred] = Some(p.gt);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskHeadConfig {
    pub conv_layers: usize,
}

impl Default for MaskHeadConfig {
    fn default() -> Self {
        Self { conv_layers: 2 }
    }
}

/// RoI crop at `S x S` followed by 3x3 convolutions and a 1x1 projection to
/// the mask channels.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub convs: Vec<Conv2d>,
    pub out: Conv2d,
    pub roi_size: usize,
}

impl MaskHead {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, mask_channels: usize, roi_size: usize, cfg: &MaskHeadConfig) -> Self {
        Self {
            convs: (0..cfg.conv_layers)
                .map(|i| Conv2d::new(&mut pb.sub(&format!("conv{i}")), dim, dim, 3, 1, 1))
                .collect(),
            out: Conv2d::new(&mut pb.sub("out"), dim, mask_channels, 1, 1, 0),
            roi_size,
        }
    }

    /// Mask logits `[S * S, C_m]` for one box over a stride-`stride` map.
    pub fn forward<'t>(&self, b: &Binding<'t>, map: FeatureMap<'t>, bbox: Var<'t>, stride: f64) -> FeatureMap<'t> {
        let s = self.roi_size;
        let mut x = FeatureMap::new(map.data.roi_align((map.h, map.w), bbox, (s, s), stride), s, s);
        for conv in &self.convs {
            let y = conv.forward(b, x);
            x = y.with_data(y.data.gelu());
        }
        self.out.forward(b, x)
    }
}

/// Rasterized polygon target at `S x S` over `bbox`, as `[S * S]`.
pub fn mask_target(polygon: &[Point], bbox: &RoiBox, roi_size: usize) -> Tensor {
    Tensor::from_vec([roi_size * roi_size], rasterize(polygon, *bbox, roi_size, roi_size))
}

/// Positive-cell gather indices for `[cells, 4]` boxes.
pub fn box_rows(cells: &[usize]) -> Rc<[usize]> {
    cells.iter().flat_map(|&c| (0..4).map(move |k| c * 4 + k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::geometry::rectangle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt(x0: f64, y0: f64, x1: f64, y1: f64) -> TextInstanceGt {
        TextInstanceGt {
            polygon: rectangle(x0, y0, x1, y1),
            transcription: "AB".into(),
            legible: true,
        }
    }

    #[test]
    fn zero_jitter_returns_gt_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gts = [gt(10.0, 12.0, 40.0, 30.0), gt(50.0, 60.0, 90.0, 75.0)];
        let props = propose_gt_guided(&gts, 0.0, (128, 128), &mut rng);
        assert_eq!(props[0].bbox, [10.0, 12.0, 40.0, 30.0]);
        assert_eq!(props[1].bbox, [50.0, 60.0, 90.0, 75.0]);
    }

    #[test]
    fn uniform_scores_follow_row_major_order() {
        let n = 6;
        let boxes = Tensor::from_vec([n, 4], (0..n).flat_map(|i| [i as f64, 0.0, i as f64 + 1.0, 1.0]).collect());
        let props = propose_learned(&[0.5; 6], &boxes, 3, 0.0, None, (10, 10));
        let xs: Vec<f64> = props.iter().map(|p| p.bbox[0]).collect();
        assert_eq!(xs, [0.0, 1.0, 2.0]);
        let mut spiked = vec![0.1; 6];
        spiked[4] = 0.9;
        assert_eq!(propose_learned(&spiked, &boxes, 1, 0.0, None, (10, 10))[0].bbox[0], 4.0);
        assert_eq!(propose_learned(&spiked, &boxes, 50, 0.0, None, (10, 10)).len(), 6);
    }

    #[test]
    fn matching_examples() {
        let g = [[0.0, 0.0, 10.0, 10.0]];
        assert_eq!(match_proposals_to_gt(&g, &g, 0.5, false).unwrap(), [Some(0)]);
        let p = [[1.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]];
        assert_eq!(match_proposals_to_gt(&p, &g, 0.5, false).unwrap(), [None, Some(0)]);
        assert!(match_proposals_to_gt(&p, &g, 1.0, false).is_err());
    }

    #[test]
    fn dense_targets_assign_inside_cells() {
        let t = dense_targets(4, 4, 8.0, &[gt(0.0, 0.0, 16.0, 8.0)]);
        assert_eq!(t.positives, [(0, 0), (1, 0)]);
        let tiny = dense_targets(4, 4, 8.0, &[gt(9.0, 9.0, 11.0, 11.0)]);
        assert_eq!(tiny.positives, [(5, 0)]);
        let dnc = TextInstanceGt::illegible(rectangle(0.0, 0.0, 32.0, 8.0));
        let t = dense_targets(4, 4, 8.0, &[dnc]);
        assert!(t.positives.is_empty());
        assert_eq!(t.ignored.iter().filter(|&&x| x).count(), 4);
    }
}
