//! Anchors over the pyramid, and their assignment to ground-truth boxes.

use autoprompt::data::{synth_image, SynthConfig};
use autoprompt::detect::{decode_deltas, match_anchors};
use autoprompt::harness::ModelConfig;

fn main() -> autoprompt::Result<()> {
    let model = ModelConfig::toy(128, 8, 32, 32, 2);
    let anchors = model.generate_anchors()?;
    println!("{} anchors, {} per cell", anchors.len(), model.anchors.per_cell());
    for (l, (n, s)) in anchors.level_counts.iter().zip(&anchors.strides).enumerate() {
        println!("  level {}: {n} anchors, stride {s}", l + 1);
    }

    let sample = synth_image(&SynthConfig::new(3, 1, 128, 2), 0)?.sample;
    let gt = sample.gt_boxes();
    let t = match_anchors(&anchors.boxes, &gt)?;
    let ignored = t.labels.iter().filter(|&&l| l < 0).count();
    println!("{} boxes → {} foreground, {} ignored anchors", gt.len(), t.num_foreground(), ignored);

    // Every positive anchor's regression target decodes back to its box.
    if let Some(i) = (0..anchors.len()).find(|&i| t.positive(i)) {
        let d = t.deltas[i].map(f64::from);
        println!("anchor {:?} + {:?} → {:?}", anchors.boxes[i], d, decode_deltas(&anchors.boxes[i], d));
    }
    Ok(())
}
