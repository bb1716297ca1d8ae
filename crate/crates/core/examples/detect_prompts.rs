//! Box prompts and stub masks for one image, from a freshly trained
//! checkpoint. A real mask decoder can be plugged in through `Bridge`.

use autoprompt::data::{synth_generate, SynthConfig};
use autoprompt::harness::{detect_image, train, ModelConfig, RunConfig};

fn main() -> autoprompt::Result<()> {
    let root = std::env::temp_dir().join("autoprompt-example-detect");
    synth_generate(&SynthConfig::new(1, 32, 128, 2), &root.join("train"))?;
    let cfg = RunConfig {
        data: root.join("train"),
        out: root.join("run"),
        model: ModelConfig::toy(128, 8, 32, 32, 2),
        epochs: 3,
        ..Default::default()
    };
    let run = train(&cfg)?;

    let mut post = cfg.post;
    post.prompt_threshold = 0.2;
    let image = root.join("train/images/synth_00000.png");
    let out = detect_image(&run.best_checkpoint(), &image, true, None, &root.join("detect"), Some(post))?;
    println!("{} prompts above {}", out.detections_above_threshold, post.prompt_threshold);
    for b in out.prompts.boxes.iter().take(5) {
        println!("  class {} score {:.3} [{:.1}, {:.1}, {:.1}, {:.1}]", b.class, b.score, b.x1, b.y1, b.x2, b.y2);
    }
    if let Some(seg) = out.segmentation {
        println!("{} instances merged; artifacts in {}", seg.num_instances(), root.join("detect").display());
    }
    Ok(())
}
