//! Class-wise NMS over overlapping detections, then ellipse masks merged
//! into one instance map where higher scores win contested pixels.

use autoprompt::detect::BBox;
use autoprompt::harness::merge_prompts;
use autoprompt::postprocess::{nms, stub_mask_decoder, Detection, MaskMode, PromptFile};

fn main() -> autoprompt::Result<()> {
    let d = |x1, y1, x2, y2, class, score| Detection { bbox: BBox::new(x1, y1, x2, y2), class, score };
    let dets = vec![
        d(10.0, 10.0, 30.0, 30.0, 1, 0.9),
        d(12.0, 11.0, 31.0, 29.0, 1, 0.8), // duplicate of the first
        d(12.0, 11.0, 31.0, 29.0, 2, 0.7), // same place, other class: kept
        d(25.0, 20.0, 45.0, 40.0, 1, 0.6),
    ];
    let kept = nms(&dets, 0.5);
    for k in &kept {
        println!("kept class {} score {} {:?}", k.class, k.score, k.bbox);
    }

    let prompts = PromptFile::from_detections("demo", &kept);
    let stack = stub_mask_decoder(&prompts, 48, 48, MaskMode::Ellipse);
    let seg = merge_prompts(&stack, &prompts)?;
    println!("{} instances, areas {:?}", seg.num_instances(), seg.areas());
    for r in (0..48).step_by(3) {
        let row: String = (0..48).step_by(2).map(|c| char::from_digit(seg.ids[r * 48 + c], 10).unwrap_or('#')).collect();
        println!("{}", row.replace('0', "."));
    }
    Ok(())
}
