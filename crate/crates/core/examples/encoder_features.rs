//! Run the frozen toy encoder, split its layers into the four decoder
//! blocks, and round-trip the features through an embedding archive.

use autoprompt::data::synth_image;
use autoprompt::data::SynthConfig;
use autoprompt::encoder::{block_indices, load_embeddings, save_embeddings, EncoderConfig, ToyEncoder};

fn main() -> autoprompt::Result<()> {
    let cfg = EncoderConfig { image_size: 128, patch_size: 8, embed_dim: 32, ..Default::default() };
    let enc = ToyEncoder::new(cfg.clone(), 7)?;
    let image = synth_image(&SynthConfig::new(3, 1, 128, 2), 0)?.sample.image;

    let feats = enc.forward(&image)?;
    println!("{} layers of {:?}", feats.features.len(), feats.features[0].shape());
    println!("blocks (layer indices): {:?}", block_indices(&cfg)?);

    let dir = std::env::temp_dir().join("autoprompt-example-embeddings");
    save_embeddings(&feats, &dir)?;
    let back = load_embeddings(&dir)?;
    println!("archive at {} round-trips: {}", dir.display(), back == feats);
    Ok(())
}
