//! Generate a small synthetic blob dataset and summarize it.
//!
//! cargo run --example synth_dataset -- /tmp/blobs

use autoprompt::data::{load_dataset, synth_generate, SynthConfig};

fn main() -> autoprompt::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-blobs".into());
    let cfg = SynthConfig::new(1, 20, 128, 2);
    let s = synth_generate(&cfg, out.as_ref())?;
    println!("{} images, {} blobs ({} skipped), per class {:?}", s.images, s.blobs, s.skipped, s.class_counts);

    let ds = load_dataset(out.as_ref())?;
    let first = &ds.samples[0];
    println!("{}: {} nuclei", first.name, first.gt.num_instances());
    for b in first.gt_boxes().iter().take(5) {
        println!("  {} {:?}", ds.class_name(b.class), b.bbox);
    }
    Ok(())
}
