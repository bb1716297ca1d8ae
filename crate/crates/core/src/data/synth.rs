//! Synthetic nucleus-like blob images.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{create_layout, write_sample, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::instance::InstanceSegmentation;
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 6] = [
    [0.28, 0.10, 0.45],
    [0.85, 0.35, 0.50],
    [0.15, 0.35, 0.70],
    [0.55, 0.25, 0.10],
    [0.10, 0.50, 0.30],
    [0.60, 0.55, 0.10],
];
const BACKGROUND: [f32; 3] = [0.93, 0.86, 0.90];
const PLACEMENT_RETRIES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    /// Inclusive range of blobs attempted per image.
    pub blobs: (usize, usize),
    /// Inclusive range of ellipse semi-axes in pixels.
    pub radius: (f64, f64),
    /// Relative class frequencies; uniform when empty.
    #[serde(default)]
    pub class_weights: Vec<f64>,
    /// Per-pixel noise standard deviation.
    pub noise: f32,
}

impl SynthConfig {
    pub fn new(seed: u64, count: usize, size: usize, num_classes: usize) -> Self {
        SynthConfig {
            seed,
            count,
            size,
            num_classes,
            blobs: (3, 8),
            radius: (6.0, 11.0),
            class_weights: Vec::new(),
            noise: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("synthetic data needs at least one class".into()));
        }
        if self.blobs.0 > self.blobs.1 || self.radius.0 > self.radius.1 || self.radius.0 < 1.0 {
            return Err(Error::Config("synthetic blob/radius ranges are empty or too small".into()));
        }
        if 2.0 * self.radius.1 + 4.0 > self.size as f64 {
            return Err(Error::Config(format!(
                "image size {} cannot hold blobs of semi-axis {}",
                self.size, self.radius.1
            )));
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.num_classes || self.class_weights.iter().any(|&w| !(w >= 0.0)))
        {
            return Err(Error::Config("class_weights must list one non-negative weight per class".into()));
        }
        Ok(())
    }

    pub fn color(&self, class: u32) -> [f32; 3] {
        PALETTE[(class as usize - 1) % PALETTE.len()]
    }

    fn weights(&self) -> Vec<f64> {
        if self.class_weights.is_empty() {
            vec![1.0; self.num_classes]
        } else {
            self.class_weights.clone()
        }
    }
}

/// One placed ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    /// Horizontal and vertical semi-axes.
    pub axes: (f64, f64),
    pub class: u32,
}

impl Blob {
    fn contains(&self, r: usize, c: usize, grow: f64) -> bool {
        let dx = (c as f64 + 0.5 - self.center.0) / (self.axes.0 + grow);
        let dy = (r as f64 + 0.5 - self.center.1) / (self.axes.1 + grow);
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub sample: Sample,
    pub blobs: Vec<Blob>,
    pub skipped: usize,
}

/// Per-image RNG: the same image index always draws the same stream.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn synth_image(cfg: &SynthConfig, index: usize) -> Result<SynthImage> {
    cfg.validate()?;
    let mut rng = image_rng(cfg.seed, index);
    let n = cfg.size;
    let classes = WeightedIndex::new(cfg.weights()).map_err(|e| Error::Config(format!("class_weights: {e}")))?;
    let target = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
    let mut ids = vec![0u32; n * n];
    let mut blobs = Vec::new();
    let mut skipped = 0;
    for _ in 0..target {
        let class = classes.sample(&mut rng) as u32 + 1;
        let axes = (
            rng.random_range(cfg.radius.0..=cfg.radius.1),
            rng.random_range(cfg.radius.0..=cfg.radius.1),
        );
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cx = rng.random_range(axes.0 + 1.0..n as f64 - axes.0 - 1.0);
            let cy = rng.random_range(axes.1 + 1.0..n as f64 - axes.1 - 1.0);
            let blob = Blob {
                center: (cx, cy),
                axes,
                class,
            };
            // Keep a one-pixel gap so instances never touch.
            let (r0, r1, c0, c1) = bounds(&blob, 2.0, n);
            let free = (r0..r1).all(|r| (c0..c1).all(|c| ids[r * n + c] == 0 || !blob.contains(r, c, 2.0)));
            if free {
                placed = Some(blob);
                break;
            }
        }
        let Some(blob) = placed else {
            skipped += 1;
            continue;
        };
        let id = blobs.len() as u32 + 1;
        let (r0, r1, c0, c1) = bounds(&blob, 0.0, n);
        let mut any = false;
        for r in r0..r1 {
            for c in c0..c1 {
                if blob.contains(r, c, 0.0) {
                    ids[r * n + c] = id;
                    any = true;
                }
            }
        }
        if any {
            blobs.push(blob);
        } else {
            skipped += 1;
        }
    }

    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let phase: (f32, f32) = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    let mut image = vec![0.0f32; 3 * n * n];
    for r in 0..n {
        for c in 0..n {
            let p = r * n + c;
            let texture = 0.03 * ((r as f32 * 0.21 + phase.0).sin() * (c as f32 * 0.17 + phase.1).cos());
            let (base, shade) = match ids[p] {
                0 => (BACKGROUND, texture),
                id => {
                    let b = &blobs[id as usize - 1];
                    let dx = (c as f64 + 0.5 - b.center.0) / b.axes.0;
                    let dy = (r as f64 + 0.5 - b.center.1) / b.axes.1;
                    (cfg.color(b.class), 0.08 * (dx * dx + dy * dy) as f32)
                }
            };
            for ch in 0..3 {
                let v = base[ch] + shade + noise.sample(&mut rng);
                image[ch * n * n + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    let classes: Vec<u32> = blobs.iter().map(|b| b.class).collect();
    let gt = InstanceSegmentation::new(n, n, ids, classes, None)?;
    Ok(SynthImage {
        sample: Sample {
            name: format!("synth_{index:05}"),
            image: Tensor::new(&[3, n, n], image)?,
            gt,
        },
        blobs,
        skipped,
    })
}

fn bounds(b: &Blob, grow: f64, n: usize) -> (usize, usize, usize, usize) {
    let lo = |c: f64, a: f64| (c - a - grow - 1.0).floor().max(0.0) as usize;
    let hi = |c: f64, a: f64| ((c + a + grow + 1.0).ceil().max(0.0) as usize).min(n);
    (
        lo(b.center.1, b.axes.1),
        hi(b.center.1, b.axes.1),
        lo(b.center.0, b.axes.0),
        hi(b.center.0, b.axes.0),
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images: usize,
    pub blobs: usize,
    pub skipped: usize,
    pub class_counts: Vec<usize>,
}

/// Writes `cfg.count` images into the dataset layout at `root`.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let manifest = DatasetManifest {
        num_classes: cfg.num_classes,
        class_names: (1..=cfg.num_classes).map(|k| format!("class{k}")).collect(),
    };
    create_layout(root, &manifest)?;
    let mut summary = SynthSummary {
        class_counts: vec![0; cfg.num_classes],
        ..Default::default()
    };
    for i in 0..cfg.count {
        let img = synth_image(cfg, i)?;
        write_sample(root, &img.sample)?;
        summary.images += 1;
        summary.blobs += img.blobs.len();
        summary.skipped += img.skipped;
        for b in &img.blobs {
            summary.class_counts[b.class as usize - 1] += 1;
        }
    }
    Ok(summary)
}
