//! Trains the desk model on a freshly generated synthetic set and reports
//! training-set scores.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [iterations] [samples] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use textspot::datagen::{synthesize_dataset, GenConfig};
use textspot::evalkit::{EvalConfig, Protocol};
use textspot::trainer::{evaluate_model, TrainConfig, Trainer};

fn main() -> textspot::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    let samples: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(32);
    let out = args.next().map(PathBuf::from);

    let data = synthesize_dataset(&GenConfig::default(), 7, samples)?;
    let mut cfg = TrainConfig::desk();
    cfg.iterations = iterations;
    cfg.milestones.retain(|&m| m < iterations);
    cfg.eval_every = (iterations / 10).max(1);

    let mut trainer = Trainer::new(cfg)?;
    println!("{} parameters ({} scalars)", trainer.store.len(), trainer.store.num_scalars());
    let start = Instant::now();
    let outcome = trainer.run(&data, out.as_deref())?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} iterations in {secs:.1}s ({:.3}s/iter), stopped early: {}",
        outcome.iterations,
        secs / outcome.iterations.max(1) as f64,
        outcome.stopped_early
    );
    if let (Some(first), Some(last)) = (outcome.steps.first(), outcome.steps.last()) {
        println!("L_match {:.4} -> {:.4}", first.loss.l_match, last.loss.l_match);
    }
    let eval = EvalConfig {
        protocols: vec![Protocol::None, Protocol::Full],
        ..EvalConfig::default()
    };
    let report = evaluate_model(&trainer.model, &trainer.store, &data, &eval)?;
    println!("{}", report.summary());
    Ok(())
}
