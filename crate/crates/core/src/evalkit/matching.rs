//! One-to-one matching of predictions to ground truth, and detection scores.

use serde::{Deserialize, Serialize};

use crate::datagen::TextInstanceGt;
use crate::error::{Error, Result};
use crate::evalkit::geometry::{coverage, polygon_iou, Point};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    /// Predictions absorbed by do-not-care ground truth.
    pub ignored_preds: Vec<usize>,
    /// Do-not-care ground truth.
    pub ignored_gts: Vec<usize>,
    pub num_preds: usize,
    pub num_gts: usize,
}

impl MatchResult {
    pub fn valid_preds(&self) -> usize {
        self.num_preds - self.ignored_preds.len()
    }

    pub fn valid_gts(&self) -> usize {
        self.num_gts - self.ignored_gts.len()
    }
}

/// Greedy one-to-one assignment on a `rows x cols` score matrix.
///
/// Candidates with score `>= threshold` are taken in descending score order;
/// ties go to the lower row index, then the lower column index.
pub fn greedy_assign(scores: &[Vec<f64>], threshold: f64) -> Vec<MatchedPair> {
    let mut cand: Vec<MatchedPair> = Vec::new();
    for (r, row) in scores.iter().enumerate() {
        for (c, &s) in row.iter().enumerate() {
            if s >= threshold {
                cand.push(MatchedPair { pred: r, gt: c, iou: s });
            }
        }
    }
    cand.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    let (mut row_used, mut col_used) = (vec![false; rows], vec![false; cols]);
    let mut out = Vec::new();
    for m in cand {
        if !row_used[m.pred] && !col_used[m.gt] {
            row_used[m.pred] = true;
            col_used[m.gt] = true;
            out.push(m);
        }
    }
    out.sort_by_key(|m| m.pred);
    out
}

/// Assignment maximizing the total score over pairs `>= threshold`, by dynamic
/// programming over subsets of columns. Falls back to greedy above 16 columns.
pub fn optimal_assign(scores: &[Vec<f64>], threshold: f64) -> Vec<MatchedPair> {
    let cols = scores.first().map_or(0, Vec::len);
    if cols > 16 {
        log::warn!("optimal_assign: {cols} columns, falling back to greedy matching");
        return greedy_assign(scores, threshold);
    }
    let rows = scores.len();
    let states = 1usize << cols;
    // best[r][mask]: best total using rows r.. with columns in mask taken
    let mut best = vec![vec![0.0f64; states]; rows + 1];
    let mut choice = vec![vec![usize::MAX; states]; rows];
    for r in (0..rows).rev() {
        for mask in 0..states {
            let mut b = best[r + 1][mask];
            let mut ch = usize::MAX;
            for c in 0..cols {
                let s = scores[r][c];
                if mask & (1 << c) == 0 && s >= threshold {
                    let v = s + best[r + 1][mask | (1 << c)];
                    if v > b {
                        b = v;
                        ch = c;
                    }
                }
            }
            best[r][mask] = b;
            choice[r][mask] = ch;
        }
    }
    let mut out = Vec::new();
    let mut mask = 0;
    for r in 0..rows {
        let c = choice[r][mask];
        if c != usize::MAX {
            out.push(MatchedPair { pred: r, gt: c, iou: scores[r][c] });
            mask |= 1 << c;
        }
    }
    out
}

/// Greedy polygon-IoU matching against legible ground truth. Unmatched
/// predictions covered at least `iou_threshold` by a do-not-care instance are
/// absorbed and count neither for nor against precision.
pub fn match_detections(preds: &[Vec<Point>], gts: &[TextInstanceGt], iou_threshold: f64) -> Result<MatchResult> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidInput(format!("IoU threshold {iou_threshold} outside (0, 1)")));
    }
    let scores: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| if g.legible { polygon_iou(p, &g.polygon) } else { f64::NEG_INFINITY })
                .collect()
        })
        .collect();
    let pairs = greedy_assign(&scores, iou_threshold);
    let mut matched = vec![false; preds.len()];
    for m in &pairs {
        matched[m.pred] = true;
    }
    let ignored_gts: Vec<usize> = (0..gts.len()).filter(|&g| !gts[g].legible).collect();
    let ignored_preds = (0..preds.len())
        .filter(|&p| !matched[p] && ignored_gts.iter().any(|&g| coverage(&preds[p], &gts[g].polygon) >= iou_threshold))
        .collect();
    Ok(MatchResult {
        pairs,
        ignored_preds,
        ignored_gts,
        num_preds: preds.len(),
        num_gts: gts.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
}

impl Scores {
    /// Zero denominators give zero.
    pub fn from_counts(matched: usize, valid_preds: usize, valid_gts: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(matched, valid_preds);
        let recall = ratio(matched, valid_gts);
        Self {
            precision,
            recall,
            hmean: hmean(precision, recall),
        }
    }
}

pub fn hmean(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Summed match counts, for aggregating over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub matched: usize,
    pub valid_preds: usize,
    pub valid_gts: usize,
}

impl Counts {
    pub fn scores(&self) -> Scores {
        Scores::from_counts(self.matched, self.valid_preds, self.valid_gts)
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.matched += o.matched;
        self.valid_preds += o.valid_preds;
        self.valid_gts += o.valid_gts;
    }
}

pub fn compute_hmean(m: &MatchResult) -> Scores {
    Scores::from_counts(m.pairs.len(), m.valid_preds(), m.valid_gts())
}
