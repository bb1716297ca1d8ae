//! Trainable parameters of the desk-scale and full-scale configurations.

use autoprompt::harness::{full_config_parameter_report, Detector, ModelConfig};

fn main() -> autoprompt::Result<()> {
    let desk: Detector = Detector::new(ModelConfig::toy(128, 8, 32, 32, 2), 0)?;
    println!("desk (128 px, 32 channels): {}", desk.trainable_parameters());
    let (ours, reference) = full_config_parameter_report(5)?;
    println!("full (1024 px, 768 → 256 channels): {ours}  [reference figure {:.2}M]", reference as f64 / 1e6);
    let mut by_part = std::collections::BTreeMap::<String, usize>::new();
    let full: Detector = Detector::new(ModelConfig::full(5), 0)?;
    for (name, p) in full.store.params() {
        if p.trainable {
            let part = name.split('.').take(2).collect::<Vec<_>>().join(".");
            *by_part.entry(part).or_default() += p.value.numel();
        }
    }
    for (k, v) in by_part {
        println!("  {k:24} {v}");
    }
    Ok(())
}
