//! Loss components and their weighted combination.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp used by the focal loss.
pub const FOCAL_EPS: f64 = 1e-7;

/// `mean(-alpha * (1 - p)^gamma * ln p)` over the elements of `p_true`,
/// with `p` clamped to `[eps, 1 - eps]`.
pub fn focal_loss<'t>(p_true: Var<'t>, alpha: f64, gamma: f64) -> Var<'t> {
    let p = p_true.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let modulating = p.neg().add_scalar(1.0).powf(gamma);
    modulating.mul(p.ln()).scale(-alpha).mean()
}

/// Focal loss on binary logits. Positives are weighted by `alpha`,
/// negatives by `1 - alpha`; averaged over all elements.
pub fn sigmoid_focal_loss<'t>(logits: Var<'t>, targets: &[bool], alpha: f64, gamma: f64) -> Var<'t> {
    let n = targets.len();
    assert_eq!(logits.numel(), n, "focal loss targets");
    let tape = logits.tape();
    let sign: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { -1.0 }).collect();
    let base: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect();
    let alpha_t: Vec<f64> = targets.iter().map(|&t| if t { alpha } else { 1.0 - alpha }).collect();
    let s = logits.reshape([n]).sigmoid();
    let p = s
        .mul(tape.constant(Tensor::from_vec([n], sign)))
        .add(tape.constant(Tensor::from_vec([n], base)))
        .clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let modulating = p.neg().add_scalar(1.0).powf(gamma);
    modulating
        .mul(p.ln())
        .mul(tape.constant(Tensor::from_vec([n], alpha_t)))
        .neg()
        .mean()
}

fn column<'t>(boxes: Var<'t>, col: usize) -> Var<'t> {
    let n = boxes.shape()[0];
    let idx: Rc<[usize]> = (0..n).map(|i| i * 4 + col).collect();
    boxes.gather(idx, [n])
}

fn check_boxes(t: &Tensor, what: &str) -> Result<()> {
    for (i, b) in t.data().chunks(4).enumerate() {
        if !b.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} box {i}")));
        }
        if !(b[2] > b[0] && b[3] > b[1]) {
            return Err(Error::InvalidInput(format!("{what} box {i} has zero area: {b:?}")));
        }
    }
    Ok(())
}

/// `mean(1 - GIoU)` over rows of `[n, 4]` boxes `(x_min, y_min, x_max, y_max)`.
pub fn giou_loss<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[1] != 4 || gt.shape() != shape {
        return Err(Error::shape(format!("GIoU boxes {:?} vs {:?}", shape, gt.shape())));
    }
    check_boxes(&pred.value(), "predicted")?;
    check_boxes(&gt.value(), "ground-truth")?;
    let [px0, py0, px1, py1] = std::array::from_fn(|c| column(pred, c));
    let [gx0, gy0, gx1, gy1] = std::array::from_fn(|c| column(gt, c));
    let area_p = px1.sub(px0).mul(py1.sub(py0));
    let area_g = gx1.sub(gx0).mul(gy1.sub(gy0));
    let iw = px1.minimum(gx1).sub(px0.maximum(gx0)).relu();
    let ih = py1.minimum(gy1).sub(py0.maximum(gy0)).relu();
    let inter = iw.mul(ih);
    let union = area_p.add(area_g).sub(inter);
    let hull = px1.maximum(gx1).sub(px0.minimum(gx0)).mul(py1.maximum(gy1).sub(py0.minimum(gy0)));
    let iou = inter.mul(union.powf(-1.0));
    let penalty = hull.sub(union).mul(hull.powf(-1.0));
    Ok(iou.sub(penalty).neg().add_scalar(1.0).mean())
}

/// Mean absolute error between `[n, 4]` boxes after dividing x by `width`
/// and y by `height`.
pub fn l1_loss<'t>(pred: Var<'t>, gt: Var<'t>, width: f64, height: f64) -> Var<'t> {
    assert_eq!(pred.shape(), gt.shape(), "L1 boxes");
    let scale = pred.tape().constant(Tensor::from_vec([4], vec![1.0 / width, 1.0 / height, 1.0 / width, 1.0 / height]));
    pred.sub(gt).mul_row(scale).abs().mean()
}

/// Mean binary cross-entropy between mask logits and a binary target.
pub fn mask_loss<'t>(logits: Var<'t>, target: &Tensor) -> Var<'t> {
    logits.reshape(target.shape().to_vec()).bce_with_logits_mean(target)
}

/// `-(1 / T_eff) * sum_k ln p(y_k)` where `log_probs` is `[T, classes]` and
/// `targets` holds the `T_eff <= T` supervised class indices.
pub fn recognition_loss<'t>(log_probs: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let shape = log_probs.shape();
    if shape.len() != 2 || targets.len() > shape[0] || targets.is_empty() {
        return Err(Error::shape(format!("{} targets for log-probs {:?}", targets.len(), shape)));
    }
    let k = shape[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidInput(format!("target class {bad} out of {k}")));
    }
    let idx: Rc<[usize]> = targets.iter().enumerate().map(|(step, &t)| step * k + t).collect();
    Ok(log_probs.gather(idx, [targets.len()]).sum().scale(-1.0 / targets.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    pub giou: f64,
    pub l1: f64,
    pub mask: f64,
    pub rec: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            giou: 2.0,
            l1: 5.0,
            mask: 2.0,
            rec: 1.0,
        }
    }
}

/// The un-weighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub mask: f64,
    pub rec: f64,
}

impl LossComponents {
    fn check(&self) -> Result<()> {
        for (name, v) in [("L_cls", self.cls), ("L_giou", self.giou), ("L_L1", self.l1), ("L_mask", self.mask), ("L_rec", self.rec)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }
}

/// `L_cls + l_giou * L_giou + l_L1 * L_L1 + l_mask * L_mask`.
pub fn detection_loss(c: &LossComponents, l: &Lambdas) -> Result<f64> {
    c.check()?;
    Ok(c.cls + l.giou * c.giou + l.l1 * c.l1 + l.mask * c.mask)
}

/// `L_det + l_rec * L_rec`.
pub fn joint_loss(l_det: f64, l_rec: f64, lambda_rec: f64) -> Result<f64> {
    for (name, v) in [("L_det", l_det), ("L_rec", l_rec)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(l_det + lambda_rec * l_rec)
}

/// Every component with its totals and weights, as logged per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_giou: f64,
    pub l_l1: f64,
    pub l_mask: f64,
    pub l_det: f64,
    pub l_rec: f64,
    pub l_match: f64,
    pub lambdas: Lambdas,
}

impl LossBreakdown {
    pub fn new(c: &LossComponents, lambdas: &Lambdas) -> Result<Self> {
        let l_det = detection_loss(c, lambdas)?;
        let l_match = joint_loss(l_det, c.rec, lambdas.rec)?;
        Ok(Self {
            l_cls: c.cls,
            l_giou: c.giou,
            l_l1: c.l1,
            l_mask: c.mask,
            l_det,
            l_rec: c.rec,
            l_match,
            lambdas: *lambdas,
        })
    }

    /// Breakdown whose totals come from the differentiable graph rather than
    /// from recombining the components.
    pub fn from_vars(vars: &LossVars<'_>, lambdas: &Lambdas) -> Result<Self> {
        let c = vars.components();
        c.check()?;
        let (l_det, l_match) = (vars.detection(lambdas).item(), vars.joint(lambdas).item());
        joint_loss(l_det, c.rec, lambdas.rec)?;
        Ok(Self {
            l_cls: c.cls,
            l_giou: c.giou,
            l_l1: c.l1,
            l_mask: c.mask,
            l_det,
            l_rec: c.rec,
            l_match,
            lambdas: *lambdas,
        })
    }

    /// Largest gap between the stored totals and their recombination.
    pub fn recomposition_error(&self) -> f64 {
        let c = self.components();
        let det = detection_loss(&c, &self.lambdas).unwrap_or(f64::NAN);
        let joint = det + self.lambdas.rec * self.l_rec;
        (det - self.l_det).abs().max((joint - self.l_match).abs())
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            cls: self.l_cls,
            giou: self.l_giou,
            l1: self.l_l1,
            mask: self.l_mask,
            rec: self.l_rec,
        }
    }
}

/// Differentiable totals, combined in the same order as [`detection_loss`]
/// and [`joint_loss`].
pub struct LossVars<'t> {
    pub cls: Var<'t>,
    pub giou: Var<'t>,
    pub l1: Var<'t>,
    pub mask: Var<'t>,
    pub rec: Var<'t>,
}

impl<'t> LossVars<'t> {
    pub fn detection(&self, l: &Lambdas) -> Var<'t> {
        self.cls
            .add(self.giou.scale(l.giou))
            .add(self.l1.scale(l.l1))
            .add(self.mask.scale(l.mask))
    }

    pub fn joint(&self, l: &Lambdas) -> Var<'t> {
        self.detection(l).add(self.rec.scale(l.rec))
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            cls: self.cls.item(),
            giou: self.giou.item(),
            l1: self.l1.item(),
            mask: self.mask.item(),
            rec: self.rec.item(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn v(tape: &Tape, data: Vec<f64>) -> Var<'_> {
        let n = data.len();
        tape.leaf(Tensor::from_vec([n], data))
    }

    #[test]
    fn focal_examples() {
        let tape = Tape::new();
        assert!(focal_loss(v(&tape, vec![1.0]), 0.25, 2.0).item().abs() < 1e-12);
        let p = 0.3;
        assert!((focal_loss(v(&tape, vec![p]), 1.0, 0.0).item() + f64::ln(p)).abs() < 1e-15);
        let half = focal_loss(v(&tape, vec![0.5]), 0.25, 2.0).item();
        assert!((half - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((half - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_focal_matches_probability_form() {
        let tape = Tape::new();
        let z = v(&tape, vec![0.3, -1.2]);
        let got = sigmoid_focal_loss(z, &[true, false], 0.25, 2.0).item();
        let p0 = 1.0 / (1.0 + (-0.3f64).exp());
        let p1 = 1.0 - 1.0 / (1.0 + 1.2f64.exp());
        let want = 0.5 * (-0.25 * (1.0 - p0).powi(2) * p0.ln() - 0.75 * (1.0 - p1).powi(2) * p1.ln());
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn giou_examples() {
        let tape = Tape::new();
        let b = |x: Vec<f64>| tape.leaf(Tensor::from_vec([1, 4], x));
        let same = giou_loss(b(vec![0.0, 0.0, 2.0, 3.0]), b(vec![0.0, 0.0, 2.0, 3.0])).unwrap();
        assert!(same.item().abs() < 1e-15);
        let inside = giou_loss(b(vec![1.0, 1.0, 2.0, 2.0]), b(vec![0.0, 0.0, 4.0, 4.0])).unwrap();
        assert!((inside.item() - (1.0 - 1.0 / 16.0)).abs() < 1e-15);
        let apart = giou_loss(b(vec![0.0, 0.0, 1.0, 1.0]), b(vec![2.0, 2.0, 3.0, 3.0])).unwrap();
        assert!((apart.item() - 16.0 / 9.0).abs() < 1e-15);
        assert!(giou_loss(b(vec![0.0, 0.0, 0.0, 1.0]), b(vec![0.0, 0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn mask_and_l1_examples() {
        let tape = Tape::new();
        let t = Tensor::from_vec([4], vec![1.0, 0.0, 1.0, 1.0]);
        assert!((mask_loss(v(&tape, vec![0.0; 4]), &t).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(mask_loss(v(&tape, vec![50.0, -50.0, 50.0, 50.0]), &t).item() < 1e-20);
        let a = tape.leaf(Tensor::from_vec([1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(l1_loss(a, a, 10.0, 10.0).item(), 0.0);
    }

    #[test]
    fn recognition_examples() {
        let tape = Tape::new();
        let lp = tape.leaf(Tensor::from_vec([2, 2], vec![0.0, f64::NEG_INFINITY, -1.0, -3.0]));
        assert_eq!(recognition_loss(lp, &[0]).unwrap().item(), 0.0);
        let lp = tape.leaf(Tensor::from_vec([2, 2], vec![-1.0, -0.5, -0.2, -3.0]));
        assert!((recognition_loss(lp, &[0, 1]).unwrap().item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn combination_arithmetic() {
        let zero = LossComponents::default();
        assert_eq!(detection_loss(&zero, &Lambdas::default()).unwrap(), 0.0);
        let ones = LossComponents { cls: 1.0, giou: 1.0, l1: 1.0, mask: 1.0, rec: 1.0 };
        let l = Lambdas { giou: 1.0, l1: 1.0, mask: 1.0, rec: 1.0 };
        let b = LossBreakdown::new(&ones, &l).unwrap();
        assert_eq!((b.l_det, b.l_match), (4.0, 5.0));
        let bad = LossComponents { mask: f64::NAN, ..ones };
        let err = detection_loss(&bad, &l).unwrap_err();
        assert!(err.to_string().contains("L_mask"));
    }
}
