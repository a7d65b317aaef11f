//! Detection and end-to-end evaluation.
//!
//! Detection matching is greedy by descending polygon IoU with do-not-care
//! absorption. End-to-end scoring reuses the detection matches and counts a
//! pair as correct when the lexicon-corrected transcription equals the ground
//! truth after normalization.

pub mod geometry;
pub mod matching;
pub mod text;

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TextInstanceGt;
use crate::error::{Error, Result};
use geometry::Point;
pub use matching::{compute_hmean, match_detections, Counts, MatchResult, MatchedPair, Scores};
pub use text::{edit_distance, lexicon_correct, Lexicon, Protocol, TextNormalization};

/// A predicted text instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub polygon: Vec<Point>,
    pub transcription: String,
    pub confidence: f64,
}

/// Parses a prediction file: `x1,y1,...,xn,yn<TAB>transcription<TAB>confidence`.
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let coords: Vec<f64> = fields[0]
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| err(format!("bad coordinate `{s}`"))))
            .collect::<Result<_>>()?;
        if coords.len() % 2 != 0 || coords.len() < 6 {
            return Err(err(format!("need an even number (>= 6) of coordinates, found {}", coords.len())));
        }
        let confidence: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad confidence `{}`", fields[2])))?;
        out.push(Prediction {
            polygon: coords.chunks(2).map(|c| [c[0], c[1]]).collect(),
            transcription: fields[1].to_string(),
            confidence,
        });
    }
    Ok(out)
}

pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut s = String::new();
    for p in preds {
        let coords: Vec<String> = p.polygon.iter().flat_map(|[x, y]| [x.to_string(), y.to_string()]).collect();
        s.push_str(&format!("{}\t{}\t{}\n", coords.join(","), p.transcription, p.confidence));
    }
    s
}

/// Number of correct end-to-end pairs among the detection matches.
pub fn end_to_end_score(
    preds: &[Prediction],
    gts: &[TextInstanceGt],
    lexicon: &Lexicon,
    iou_threshold: f64,
    normalization: TextNormalization,
) -> Result<Counts> {
    let polys: Vec<Vec<Point>> = preds.iter().map(|p| p.polygon.clone()).collect();
    let m = match_detections(&polys, gts, iou_threshold)?;
    let mut correct = 0;
    for pair in &m.pairs {
        let fixed = lexicon_correct(&preds[pair.pred].transcription, lexicon)?;
        if normalization.apply(&fixed) == normalization.apply(&gts[pair.gt].transcription) {
            correct += 1;
        }
    }
    Ok(Counts {
        matched: correct,
        valid_preds: m.valid_preds(),
        valid_gts: m.valid_gts(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconConfig {
    /// Size of each per-image strong lexicon.
    pub strong_size: usize,
    /// Size of the generated generic vocabulary when none is supplied.
    pub generic_size: usize,
    /// Seed for distractor words.
    pub seed: u64,
    pub max_distance: Option<usize>,
    /// Explicit generic vocabulary; overrides generation.
    #[serde(default)]
    pub generic_words: Option<Vec<String>>,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self {
            strong_size: 100,
            generic_size: 2000,
            seed: 0,
            max_distance: None,
            generic_words: None,
        }
    }
}

/// The lexicons of every protocol for one evaluated set.
///
/// * full: the image's own ground-truth words
/// * strong: the image's words padded with distractors to `strong_size`
/// * weak: every ground-truth word of the set
/// * generic: the weak list plus a large distractor vocabulary
#[derive(Clone, Debug)]
pub struct LexiconSet {
    full: Vec<Lexicon>,
    strong: Vec<Lexicon>,
    weak: Lexicon,
    generic: Lexicon,
    none: Lexicon,
}

fn distractor_words(rng: &mut ChaCha8Rng, count: usize, exclude: &HashSet<String>) -> Vec<String> {
    const ALPHABET: &[u8] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    let mut out = Vec::with_capacity(count);
    let mut seen = exclude.clone();
    while out.len() < count {
        let len = rng.random_range(3..=8);
        let w: String = (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl LexiconSet {
    pub fn build(gts: &[&[TextInstanceGt]], cfg: &LexiconConfig, norm: TextNormalization) -> Self {
        let words_of = |g: &[TextInstanceGt]| -> Vec<String> {
            g.iter()
                .filter(|t| t.legible)
                .map(|t| norm.apply(&t.transcription))
                .filter(|w| !w.is_empty())
                .collect()
        };
        let per_image: Vec<Vec<String>> = gts.iter().map(|g| words_of(g)).collect();
        let all: Vec<String> = per_image.iter().flatten().cloned().collect();
        let all_set: HashSet<String> = all.iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pool = distractor_words(&mut rng, cfg.strong_size.max(1), &all_set);
        let with_limit = |mut l: Lexicon| {
            l.max_distance = cfg.max_distance;
            l
        };
        let full = per_image.iter().map(|w| with_limit(Lexicon::new(Protocol::Full, w, norm))).collect();
        let strong = per_image
            .iter()
            .map(|w| {
                let mut words = w.clone();
                let own: HashSet<&String> = w.iter().collect();
                for cand in all.iter().filter(|c| !own.contains(c)).chain(pool.iter()) {
                    if words.len() >= cfg.strong_size {
                        break;
                    }
                    if !words.contains(cand) {
                        words.push(cand.clone());
                    }
                }
                with_limit(Lexicon::new(Protocol::Strong, words, norm))
            })
            .collect();
        let weak = with_limit(Lexicon::new(Protocol::Weak, &all, norm));
        let generic_words: Vec<String> = match &cfg.generic_words {
            Some(w) => all.iter().cloned().chain(w.iter().cloned()).collect(),
            None => all.iter().cloned().chain(distractor_words(&mut rng, cfg.generic_size, &all_set)).collect(),
        };
        let generic = with_limit(Lexicon::new(Protocol::Generic, generic_words, norm));
        Self {
            full,
            strong,
            weak,
            generic,
            none: Lexicon::none(),
        }
    }

    pub fn get(&self, protocol: Protocol, image: usize) -> &Lexicon {
        match protocol {
            Protocol::None => &self.none,
            Protocol::Full => &self.full[image],
            Protocol::Strong => &self.strong[image],
            Protocol::Weak => &self.weak,
            Protocol::Generic => &self.generic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub normalization: TextNormalization,
    pub lexicon: LexiconConfig,
    pub protocols: Vec<Protocol>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            normalization: TextNormalization::default(),
            lexicon: LexiconConfig::default(),
            protocols: Protocol::ALL.to_vec(),
        }
    }
}

/// Predictions and ground truth of one image.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub sample_id: String,
    pub predictions: Vec<Prediction>,
    pub ground_truth: Vec<TextInstanceGt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub sample_id: String,
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
    pub predicted: String,
    pub ground_truth: String,
    /// Whether the pair is correct under each protocol.
    pub correct: BTreeMap<Protocol, bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub iou_threshold: f64,
    pub detection: Scores,
    pub detection_counts: Counts,
    pub end_to_end: BTreeMap<Protocol, Scores>,
    pub end_to_end_counts: BTreeMap<Protocol, Counts>,
    pub pairs: Vec<PairRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// A short plain-text metrics table.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "detection  P={:.4} R={:.4} H={:.4}\n",
            self.detection.precision, self.detection.recall, self.detection.hmean
        );
        for (p, sc) in &self.end_to_end {
            s.push_str(&format!(
                "e2e {:<7} P={:.4} R={:.4} H={:.4}\n",
                p.as_str(),
                sc.precision,
                sc.recall,
                sc.hmean
            ));
        }
        s
    }
}

/// Evaluates a set of images; counts are summed over images before scoring.
pub fn evaluate(images: &[EvalImage], cfg: &EvalConfig) -> Result<EvalReport> {
    let gts: Vec<&[TextInstanceGt]> = images.iter().map(|im| im.ground_truth.as_slice()).collect();
    let lexicons = LexiconSet::build(&gts, &cfg.lexicon, cfg.normalization);
    let mut det = Counts::default();
    let mut e2e: BTreeMap<Protocol, Counts> = cfg.protocols.iter().map(|p| (*p, Counts::default())).collect();
    let mut pairs = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let polys: Vec<Vec<Point>> = im.predictions.iter().map(|p| p.polygon.clone()).collect();
        let m = match_detections(&polys, &im.ground_truth, cfg.iou_threshold)?;
        det += Counts {
            matched: m.pairs.len(),
            valid_preds: m.valid_preds(),
            valid_gts: m.valid_gts(),
        };
        let mut correct_by_pair: Vec<BTreeMap<Protocol, bool>> = vec![BTreeMap::new(); m.pairs.len()];
        for &protocol in &cfg.protocols {
            let lex = lexicons.get(protocol, i);
            let mut correct = 0;
            for (k, pair) in m.pairs.iter().enumerate() {
                let fixed = lexicon_correct(&im.predictions[pair.pred].transcription, lex)?;
                let ok = cfg.normalization.apply(&fixed) == cfg.normalization.apply(&im.ground_truth[pair.gt].transcription);
                correct += usize::from(ok);
                correct_by_pair[k].insert(protocol, ok);
            }
            *e2e.get_mut(&protocol).expect("protocol entry") += Counts {
                matched: correct,
                valid_preds: m.valid_preds(),
                valid_gts: m.valid_gts(),
            };
        }
        for (pair, correct) in m.pairs.iter().zip(correct_by_pair) {
            pairs.push(PairRecord {
                sample_id: im.sample_id.clone(),
                pred: pair.pred,
                gt: pair.gt,
                iou: pair.iou,
                predicted: im.predictions[pair.pred].transcription.clone(),
                ground_truth: im.ground_truth[pair.gt].transcription.clone(),
                correct,
            });
        }
    }
    Ok(EvalReport {
        images: images.len(),
        iou_threshold: cfg.iou_threshold,
        detection: det.scores(),
        detection_counts: det,
        end_to_end: e2e.iter().map(|(p, c)| (*p, c.scores())).collect(),
        end_to_end_counts: e2e,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use geometry::rectangle;

    fn gt(x: f64, text: &str) -> TextInstanceGt {
        TextInstanceGt {
            polygon: rectangle(x, 0.0, x + 10.0, 5.0),
            transcription: text.into(),
            legible: true,
        }
    }

    fn pred(x: f64, text: &str) -> Prediction {
        Prediction {
            polygon: rectangle(x, 0.0, x + 10.0, 5.0),
            transcription: text.into(),
            confidence: 0.9,
        }
    }

    #[test]
    fn prediction_file_round_trip() {
        let p = vec![pred(1.25, "AB"), Prediction { confidence: 0.125, ..pred(3.0, "") }];
        assert_eq!(parse_predictions(&format_predictions(&p)).unwrap(), p);
        assert!(matches!(parse_predictions("1,2,3\tA\t0.5"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn one_wrong_character() {
        let gts = vec![gt(0.0, "HELLO"), gt(20.0, "WORLD")];
        let preds = vec![pred(0.0, "HELL0"), pred(20.0, "WORLD")];
        let norm = TextNormalization::default();
        let none = end_to_end_score(&preds, &gts, &Lexicon::none(), 0.5, norm).unwrap();
        assert_eq!(none.scores().hmean, 0.5);
        let full = Lexicon::new(Protocol::Full, ["HELLO", "WORLD"], norm);
        let full = end_to_end_score(&preds, &gts, &full, 0.5, norm).unwrap();
        assert_eq!(full.scores().hmean, 1.0);
    }

    #[test]
    fn every_protocol_perfect_on_ground_truth() {
        let gts = vec![gt(0.0, "ABC"), gt(20.0, "XYZ9")];
        let images = vec![EvalImage {
            sample_id: "s".into(),
            predictions: vec![pred(0.0, "abc"), pred(20.0, "XYZ9")],
            ground_truth: gts,
        }];
        let r = evaluate(&images, &EvalConfig::default()).unwrap();
        assert_eq!(r.detection.hmean, 1.0);
        for p in Protocol::ALL {
            assert_eq!(r.end_to_end[&p].hmean, 1.0, "{p}");
        }
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let c = end_to_end_score(&[], &[gt(0.0, "A")], &Lexicon::none(), 0.5, TextNormalization::default()).unwrap();
        assert_eq!(c.scores(), Scores::default());
    }

    #[test]
    fn strong_lexicon_contains_own_words_and_has_fixed_size() {
        let a = vec![gt(0.0, "ONE"), gt(20.0, "TWO")];
        let b = vec![gt(0.0, "THREE")];
        let set = LexiconSet::build(&[&a, &b], &LexiconConfig::default(), TextNormalization::default());
        let s = set.get(Protocol::Strong, 0);
        assert_eq!(s.words.len(), 100);
        assert_eq!(&s.words[..3], &["ONE", "TWO", "THREE"]);
        assert_eq!(set.get(Protocol::Full, 1).words, vec!["THREE"]);
        assert_eq!(set.get(Protocol::Weak, 0).words.len(), 3);
        assert!(set.get(Protocol::Generic, 0).words.len() > 2000);
    }
}
