//! Trains briefly (or loads a checkpoint), runs inference on generated
//! images and writes the mask overlays of every detected instance.
//!
//! ```text
//! cargo run --release --example infer_and_visualize -- <out_dir> [run_or_checkpoint_dir]
//! ```

use std::path::PathBuf;

use textspot::cli::instance_overlays;
use textspot::datagen::dataset::save_png;
use textspot::datagen::{synthesize_dataset, GenConfig};
use textspot::trainer::{load_model, resolve_checkpoint, TrainConfig, Trainer};

fn main() -> textspot::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "overlays".into()));
    let data = synthesize_dataset(&GenConfig::default(), 7, 4)?;

    let (model, store) = match args.next() {
        Some(dir) => {
            let (_, model, store) = load_model(&resolve_checkpoint(&PathBuf::from(dir)))?;
            (model, store)
        }
        None => {
            let mut cfg = TrainConfig::desk();
            cfg.iterations = 150;
            cfg.milestones.clear();
            cfg.eval_every = 0;
            let mut trainer = Trainer::new(cfg)?;
            trainer.run(&data, None)?;
            (trainer.model, trainer.store)
        }
    };

    for s in &data {
        let found = model.infer(&store, &s.image)?;
        let truth: Vec<&str> = s.instances.iter().map(|g| g.transcription.as_str()).collect();
        println!("{}: truth {:?}", s.sample_id, truth);
        for (k, r) in found.iter().enumerate() {
            println!(
                "  #{k} score {:.3} box [{:.0} {:.0} {:.0} {:.0}] read {:?} ({:.3})",
                r.score, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3], r.transcription, r.confidence
            );
            let dir = out.join(&s.sample_id).join(format!("instance_{k}"));
            std::fs::create_dir_all(&dir).map_err(|source| textspot::Error::Io { path: dir.clone(), source })?;
            for (name, img) in instance_overlays(&s.image, r) {
                save_png(&img, &dir.join(format!("{name}.png")))?;
            }
        }
    }
    println!("overlays written to {}", out.display());
    Ok(())
}
