//! Anchor tiling over the six pyramid levels.

use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub levels: usize,
    /// Height-to-width ratios; 2.0 is a 1:2 (w:h) box, 0.5 a 2:1 box.
    pub ratios: Vec<f64>,
    /// Per-location size multipliers.
    pub scales: Vec<f64>,
    /// Anchor base side as a multiple of the level stride.
    pub base_multiplier: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            levels: 6,
            ratios: vec![2.0, 1.0, 0.5],
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            base_multiplier: 4.0,
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }

    /// Anchor shapes `(w, h)` for one cell of the given stride, ratio-major.
    pub fn cell_shapes(&self, stride: f64) -> Vec<(f64, f64)> {
        let base = self.base_multiplier * stride;
        let mut out = Vec::with_capacity(self.per_cell());
        for &r in &self.ratios {
            for &s in &self.scales {
                let size = base * s;
                out.push((size / r.sqrt(), size * r.sqrt()));
            }
        }
        out
    }
}

/// All anchors, ordered level → row → column → (ratio, scale).
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub boxes: Vec<BBox>,
    pub level_counts: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Anchors {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Level index of a flat anchor index.
    pub fn level_of(&self, index: usize) -> usize {
        let mut acc = 0;
        for (l, &c) in self.level_counts.iter().enumerate() {
            acc += c;
            if index < acc {
                return l;
            }
        }
        self.level_counts.len() - 1
    }
}

pub fn generate_anchors(cfg: &AnchorConfig, level_sizes: &[usize], image_size: usize) -> Result<Anchors> {
    if level_sizes.len() != cfg.levels {
        return Err(Error::Config(format!(
            "{} pyramid levels but anchor config has {}",
            level_sizes.len(),
            cfg.levels
        )));
    }
    let mut boxes = Vec::new();
    let mut level_counts = Vec::with_capacity(cfg.levels);
    let mut strides = Vec::with_capacity(cfg.levels);
    for &size in level_sizes {
        if size == 0 || image_size % size != 0 {
            return Err(Error::Config(format!(
                "level size {size} does not give an integer stride for image size {image_size}"
            )));
        }
        let stride = image_size / size;
        let shapes = cfg.cell_shapes(stride as f64);
        for y in 0..size {
            for x in 0..size {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                for &(w, h) in &shapes {
                    boxes.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
        level_counts.push(size * size * shapes.len());
        strides.push(stride);
    }
    Ok(Anchors {
        boxes,
        level_counts,
        strides,
    })
}
