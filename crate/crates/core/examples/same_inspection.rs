//! Runs the soft attention mask embedding on one ground-truth box and prints
//! value ranges of every intermediate map.

use textspot::autodiff::Tape;
use textspot::datagen::{synthesize_sample, GenConfig};
use textspot::evalkit::geometry::bounds;
use textspot::model::{ModelConfig, TextSpotter};
use textspot::nn::{Binding, FeatureMap};

fn describe(name: &str, f: &FeatureMap) {
    let v = f.data.value();
    let d = v.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    println!("{name:<5} {:>2}x{:<2}x{:<3} min {lo:>9.4} max {hi:>9.4} mean {mean:>9.4}", f.h, f.w, f.channels());
}

fn main() -> textspot::Result<()> {
    let sample = synthesize_sample(&GenConfig::default(), 2)?;
    let gt = &sample.instances[0];
    let bbox = bounds(&gt.polygon);
    println!("instance {:?} at [{:.1} {:.1} {:.1} {:.1}]", gt.transcription, bbox[0], bbox[1], bbox[2], bbox[3]);

    let (model, store) = TextSpotter::new(&ModelConfig::desk(), 0)?;
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let features = model.image_features(&b, &sample.image)?;
    let inst = model.instance_forward(&b, &features, bbox, false)?;
    let s = &inst.same;
    describe("mask", &inst.mask_logits);
    for (name, f) in [("a1", &s.crop.a1), ("a2", &s.crop.a2), ("a3", &s.crop.a3)] {
        describe(name, f);
    }
    let r = &s.refined;
    for (name, f) in [("d1", &r.d1), ("d2", &r.d2), ("d3", &r.d3), ("m1", &r.m1), ("m2", &r.m2), ("m3", &r.m3)] {
        describe(name, f);
    }
    for (name, f) in [("sm1", &s.fusion.sm1), ("sm2", &s.fusion.sm2), ("sm3", &s.fusion.sm3), ("gated", &inst.gated_sm3)] {
        describe(name, f);
    }
    Ok(())
}
