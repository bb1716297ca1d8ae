//! Score a deliberately imperfect prediction against synthetic ground truth:
//! the truth itself, with some nuclei dropped and the rest jittered.

use autoprompt::data::{synth_image, SynthConfig};
use autoprompt::harness::oracle_prediction;
use autoprompt::metrics::{evaluate, EvalMode, EvalSettings};
use autoprompt::harness::merge_prompts;
use autoprompt::postprocess::{stub_mask_decoder, MaskMode, PromptFile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> autoprompt::Result<()> {
    let cfg = SynthConfig::new(9, 8, 128, 2);
    let gts: Vec<_> = (0..8).map(|i| synth_image(&cfg, i).map(|s| s.sample.gt)).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut preds = Vec::new();
    for gt in &gts {
        let mut p = oracle_prediction(gt);
        p.detections.retain(|_| rng.random_bool(0.85));
        for d in &mut p.detections {
            let s = rng.random_range(-2.0..2.0);
            d.bbox.x1 += s;
            d.bbox.x2 += s;
            d.score = rng.random_range(0.3..1.0);
        }
        // Masks from the stub decoder instead of the true shapes.
        let prompts = PromptFile::from_detections("x", &p.detections);
        let stack = stub_mask_decoder(&prompts, gt.height, gt.width, MaskMode::Ellipse);
        p.segmentation = merge_prompts(&stack, &prompts)?;
        preds.push(p);
    }
    let names = vec!["class1".to_string(), "class2".to_string()];
    let r = evaluate(&preds, &gts, 2, &names, EvalMode::Full, &EvalSettings::default())?;
    println!("{}", r.summary());
    if let Some(cm) = &r.confusion {
        print!("{}", cm.to_csv(&names));
    }
    Ok(())
}
