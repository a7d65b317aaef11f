//! Compares per-module gradient norms of the recognition loss with the
//! recognition-to-encoder gradient path open and blocked.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textspot::autodiff::Tape;
use textspot::datagen::{synthesize_dataset, GenConfig, SceneSample};
use textspot::model::{LossConfig, ModelConfig, TextSpotter};
use textspot::nn::Binding;

fn main() -> textspot::Result<()> {
    let data = synthesize_dataset(&GenConfig::default(), 5, 2)?;
    let batch: Vec<&SceneSample> = data.iter().collect();
    let (model, store) = TextSpotter::new(&ModelConfig::desk(), 0)?;
    let loss_cfg = LossConfig::default();

    for blocked in [false, true] {
        let tape = Tape::new();
        let b = Binding::trainable(&tape, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (vars, _) = model.batch_loss(&b, &batch, &loss_cfg, blocked, &mut rng)?;
        let grads = tape.backward(vars.rec);
        let mut norms: BTreeMap<&str, f64> = BTreeMap::new();
        for ((name, _), v) in store.iter().zip(b.vars()) {
            let module = name.split('.').next().unwrap_or(name);
            *norms.entry(module).or_default() += grads.wrt(*v).data().iter().map(|g| g * g).sum::<f64>();
        }
        println!("gradient block {}: L_rec = {:.6}", if blocked { "on" } else { "off" }, vars.rec.item());
        for (module, sq) in norms {
            println!("  {module:<14} |dL_rec/dθ| = {:.3e}", sq.sqrt());
        }
    }
    Ok(())
}
