//! Renders a small synthetic dataset, writes it with a checksummed manifest,
//! loads it back and saves PNG previews.
//!
//! cargo run --example synthesize_dataset -- /tmp/synth 8

use std::path::PathBuf;

use textspot::datagen::dataset::save_png;
use textspot::datagen::{load_dataset, synthesize_dataset, write_dataset, AnnotationFormat, GenConfig};

fn main() -> textspot::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_dataset".into()));
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);

    let cfg = GenConfig::default();
    let samples = synthesize_dataset(&cfg, 0, count)?;
    let manifest = write_dataset(&out, &samples, AnnotationFormat::Polygon, Some(0))?;
    let (_, loaded) = load_dataset(&out)?;
    assert_eq!(loaded, samples);

    let previews = out.join("previews");
    std::fs::create_dir_all(&previews).map_err(|e| textspot::Error::Io { path: previews.clone(), source: e })?;
    for s in &samples {
        save_png(&s.image, &previews.join(format!("{}.png", s.sample_id)))?;
        let words: Vec<&str> = s.instances.iter().map(|i| i.transcription.as_str()).collect();
        println!("{}  {} instances  {:?}", s.sample_id, s.instances.len(), words);
    }
    println!("wrote {} entries to {}", manifest.entries.len(), out.display());
    Ok(())
}
