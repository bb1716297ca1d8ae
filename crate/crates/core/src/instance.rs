//! Per-pixel instance maps with per-instance classes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tsr;

/// Instance-id map (0 = background, ids dense `1..=N`) plus the class and
/// score of each instance; `classes[i]` belongs to id `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSegmentation {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub classes: Vec<u32>,
    pub scores: Vec<f32>,
}

/// Geometry derived from one instance's pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceInfo {
    pub id: u32,
    pub class: u32,
    /// Tight box in pixel-edge coordinates: `[c_min, r_min, c_max + 1, r_max + 1]`.
    pub bbox: BBox,
    /// `(row, col)` mean of member pixel coordinates.
    pub centroid: (f64, f64),
    pub area: usize,
}

impl InstanceSegmentation {
    pub fn empty(height: usize, width: usize) -> Self {
        InstanceSegmentation {
            height,
            width,
            ids: vec![0; height * width],
            classes: Vec::new(),
            scores: Vec::new(),
        }
    }

    /// Validates density: every id `1..=N` has at least one pixel and no
    /// pixel carries an id above N.
    pub fn new(height: usize, width: usize, ids: Vec<u32>, classes: Vec<u32>, scores: Option<Vec<f32>>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Invalid(format!(
                "instance map has {} pixels, expected {height}x{width}",
                ids.len()
            )));
        }
        let n = classes.len();
        let mut seen = vec![false; n];
        for &id in &ids {
            if id as usize > n {
                return Err(Error::Invalid(format!("instance id {id} has no class entry ({n} classes listed)")));
            }
            if id > 0 {
                seen[id as usize - 1] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!("instance id {} has no pixels", missing + 1)));
        }
        let scores = scores.unwrap_or_else(|| vec![1.0; n]);
        if scores.len() != n {
            return Err(Error::Invalid("score count differs from class count".into()));
        }
        Ok(InstanceSegmentation {
            height,
            width,
            ids,
            classes,
            scores,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, id: u32) -> u32 {
        self.classes[id as usize - 1]
    }

    /// Binary mask of one instance.
    pub fn mask(&self, id: u32) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.ids.iter().map(|&v| v != 0).collect()
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.num_instances()];
        for &id in &self.ids {
            if id > 0 {
                a[id as usize - 1] += 1;
            }
        }
        a
    }

    /// Boxes, centroids and areas for every instance, in id order.
    pub fn instances(&self) -> Vec<InstanceInfo> {
        let n = self.num_instances();
        let mut rmin = vec![usize::MAX; n];
        let mut cmin = vec![usize::MAX; n];
        let mut rmax = vec![0; n];
        let mut cmax = vec![0; n];
        let mut rsum = vec![0u64; n];
        let mut csum = vec![0u64; n];
        let mut area = vec![0usize; n];
        for r in 0..self.height {
            for c in 0..self.width {
                let id = self.ids[r * self.width + c];
                if id == 0 {
                    continue;
                }
                let i = id as usize - 1;
                rmin[i] = rmin[i].min(r);
                cmin[i] = cmin[i].min(c);
                rmax[i] = rmax[i].max(r);
                cmax[i] = cmax[i].max(c);
                rsum[i] += r as u64;
                csum[i] += c as u64;
                area[i] += 1;
            }
        }
        (0..n)
            .map(|i| InstanceInfo {
                id: i as u32 + 1,
                class: self.classes[i],
                bbox: BBox::new(cmin[i] as f32, rmin[i] as f32, cmax[i] as f32 + 1.0, rmax[i] as f32 + 1.0),
                centroid: (rsum[i] as f64 / area[i] as f64, csum[i] as f64 / area[i] as f64),
                area: area[i],
            })
            .collect()
    }

    /// Merges every class into class 1.
    pub fn binarized(&self) -> Self {
        InstanceSegmentation {
            classes: vec![1; self.classes.len()],
            ..self.clone()
        }
    }

    /// Id map as a `[H, W]` tensor (ids are exact in f32 below 2^24).
    pub fn id_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.ids.iter().map(|&v| v as f32).collect()).expect("id map shape")
    }

    pub fn write_ids(&self, path: &Path) -> Result<()> {
        tsr::write(path, &self.id_tensor())
    }

    /// Reads a `[H, W]` id map written by [`write_ids`](Self::write_ids).
    pub fn read_ids(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
        let t: Tensor = tsr::read_tensor(path)?;
        let [h, w] = t.shape()[..] else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("instance map must be rank 2, got {:?}", t.shape()),
            });
        };
        let mut ids = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v >= 16_777_216.0 {
                return Err(Error::Invalid(format!("{}: non-integer instance id {v}", path.display())));
            }
            ids.push(v as u32);
        }
        Ok((h, w, ids))
    }
}
