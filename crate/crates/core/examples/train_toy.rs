//! Train decoder + head on a small synthetic set and evaluate on held-out
//! images. Pass an output directory to keep the run.
//!
//! cargo run --release --example train_toy -- /tmp/toy-run

use autoprompt::data::{synth_generate, SynthConfig};
use autoprompt::harness::{train, ModelConfig, RunConfig};

fn main() -> autoprompt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-train".into()));
    synth_generate(&SynthConfig::new(1, 64, 128, 2), &root.join("train"))?;
    synth_generate(&SynthConfig::new(2, 16, 128, 2), &root.join("test"))?;

    let cfg = RunConfig {
        data: root.join("train"),
        test_data: Some(root.join("test")),
        out: root.join("run"),
        model: ModelConfig::toy(128, 8, 32, 32, 2),
        epochs: 5,
        ..Default::default()
    };
    let r = train(&cfg)?;
    for e in &r.records {
        println!("epoch {:2}  train {:.4}  val {:.4?}  lr {:.1e}", e.epoch, e.train_loss, e.val_loss, e.lr);
    }
    println!("encoder untouched: {}", r.encoder_unchanged);
    if let Some(t) = &r.test_report {
        println!("{}", t.summary());
    }
    println!("best checkpoint: {}", r.best_checkpoint().display());
    Ok(())
}
