//! Scores corrupted ground truth under every lexicon protocol, showing how
//! lexicon correction recovers misspelled words.
//!
//! ```text
//! cargo run --release --example evaluate_predictions -- [images] [typo_rate]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textspot::datagen::{synthesize_dataset, GenConfig};
use textspot::evalkit::{evaluate, EvalConfig, EvalImage, Prediction};

fn misspell(word: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    let i = rng.random_range(0..chars.len());
    chars[i] = if chars[i] == 'X' { 'Y' } else { 'X' };
    chars.into_iter().collect()
}

fn main() -> textspot::Result<()> {
    let mut args = std::env::args().skip(1);
    let images: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let typo_rate: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.4);

    let data = synthesize_dataset(&GenConfig::default(), 3, images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let eval_images: Vec<EvalImage> = data
        .iter()
        .map(|s| {
            let predictions = s
                .instances
                .iter()
                .filter(|g| g.legible)
                .map(|g| Prediction {
                    polygon: g.polygon.clone(),
                    transcription: if rng.random_bool(typo_rate) {
                        misspell(&g.transcription, &mut rng)
                    } else {
                        g.transcription.clone()
                    },
                    confidence: 1.0,
                })
                .collect();
            EvalImage {
                sample_id: s.sample_id.clone(),
                predictions,
                ground_truth: s.instances.clone(),
            }
        })
        .collect();

    let report = evaluate(&eval_images, &EvalConfig::default())?;
    print!("{}", report.summary());
    for pair in report.pairs.iter().filter(|p| p.predicted != p.ground_truth).take(5) {
        let fixed: Vec<&str> = pair.correct.iter().filter(|(_, ok)| **ok).map(|(p, _)| p.as_str()).collect();
        println!("{} read {:?} for {:?}, accepted by [{}]", pair.sample_id, pair.predicted, pair.ground_truth, fixed.join(" "));
    }
    Ok(())
}
