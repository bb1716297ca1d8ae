//! Decode four encoder blocks into the six-level feature pyramid.

use autoprompt::data::{synth_image, SynthConfig};
use autoprompt::encoder::{partition_blocks, ToyEncoder};
use autoprompt::harness::{Detector, ModelConfig};

fn main() -> autoprompt::Result<()> {
    let model = ModelConfig::toy(128, 8, 32, 32, 2);
    let enc = ToyEncoder::new(model.encoder.clone(), 7)?;
    let det: Detector = Detector::new(model.clone(), 0)?;

    let image = synth_image(&SynthConfig::new(3, 1, 128, 2), 0)?.sample.image;
    let feats = enc.forward(&image)?;
    let pyramid = det.decoder.infer(&det.store, partition_blocks(&feats)?)?;
    for (i, level) in pyramid.levels.iter().enumerate() {
        println!("p{}: {:?} (stride {})", i + 1, level.shape(), 128 / level.shape()[1]);
    }
    println!("combine {:?}, skip {:?}", model.decoder.combine, model.decoder.skip);
    println!("trainable parameters: {}", det.trainable_parameters());
    Ok(())
}
