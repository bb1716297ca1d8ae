//! Geometry (90° rotations, flips) applied to image and ground truth alike;
//! photometric changes (noise, brightness/contrast) applied to the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::instance::InstanceSegmentation;
use crate::tensor::Tensor;

pub const MAX_NOISE_SIGMA: f32 = 0.05;
pub const MAX_JITTER: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub flip: bool,
    pub noise_sigma: f32,
    /// Brightness and contrast factors are drawn from `[1 − j, 1 + j]`.
    pub jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            flip: true,
            noise_sigma: 0.02,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotate: false,
            flip: false,
            noise_sigma: 0.0,
            jitter: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.rotate && !self.flip && self.noise_sigma == 0.0 && self.jitter == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_NOISE_SIGMA).contains(&self.noise_sigma) {
            return Err(Error::Config(format!("noise_sigma must be in [0, {MAX_NOISE_SIGMA}]")));
        }
        if !(0.0..=MAX_JITTER).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must be in [0, {MAX_JITTER}]")));
        }
        Ok(())
    }
}

/// Rotation by `quarter_turns`·90° followed by the flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        self.quarter_turns % 4 == 0 && !self.hflip && !self.vflip
    }

    /// Output `(height, width)` for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Maps a pixel (or centroid) `(row, col)`; one quarter turn sends
    /// `(r, c)` to `(c, H − 1 − r)`.
    pub fn point(&self, r: f64, c: f64, h: usize, w: usize) -> (f64, f64) {
        let (mut r, mut c, mut h, mut w) = (r, c, h as f64, w as f64);
        for _ in 0..self.quarter_turns % 4 {
            (r, c) = (c, h - 1.0 - r);
            (h, w) = (w, h);
        }
        if self.hflip {
            c = w - 1.0 - c;
        }
        if self.vflip {
            r = h - 1.0 - r;
        }
        (r, c)
    }

    /// Maps a box in pixel-edge coordinates.
    pub fn bbox(&self, b: &BBox, h: usize, w: usize) -> BBox {
        let (mut b, mut h, mut w) = (*b, h as f32, w as f32);
        for _ in 0..self.quarter_turns % 4 {
            b = BBox::new(h - b.y2, b.x1, h - b.y1, b.x2);
            (h, w) = (w, h);
        }
        if self.hflip {
            b = BBox::new(w - b.x2, b.y1, w - b.x1, b.y2);
        }
        if self.vflip {
            b = BBox::new(b.x1, h - b.y2, b.x2, h - b.y1);
        }
        b
    }

    /// Applies the transform to a row-major `h × w` plane.
    pub fn plane<T: Copy>(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.output_size(h, w);
        let mut out = Vec::with_capacity(src.len());
        // Invert by scanning source positions; the map is a bijection.
        let mut dst = vec![0usize; src.len()];
        for r in 0..h {
            for c in 0..w {
                let (nr, nc) = self.point(r as f64, c as f64, h, w);
                dst[r * w + c] = nr as usize * ow + nc as usize;
            }
        }
        out.extend_from_slice(src);
        for (i, &d) in dst.iter().enumerate() {
            out[d] = src[i];
        }
        debug_assert_eq!(oh * ow, out.len());
        out
    }

    pub fn image(&self, image: &Tensor) -> Result<Tensor> {
        let [ch, h, w] = image.dims3("augment")?;
        let (oh, ow) = self.output_size(h, w);
        let mut data = Vec::with_capacity(image.numel());
        for k in 0..ch {
            data.extend(self.plane(&image.data()[k * h * w..(k + 1) * h * w], h, w));
        }
        Tensor::new(&[ch, oh, ow], data)
    }

    pub fn segmentation(&self, seg: &InstanceSegmentation) -> InstanceSegmentation {
        let (oh, ow) = self.output_size(seg.height, seg.width);
        InstanceSegmentation {
            height: oh,
            width: ow,
            ids: self.plane(&seg.ids, seg.height, seg.width),
            classes: seg.classes.clone(),
            scores: seg.scores.clone(),
        }
    }
}

/// Per-sample RNG seed so results never depend on processing order.
pub fn sample_seed(global: u64, index: usize) -> u64 {
    global ^ index as u64
}

/// Draws a transform and photometric factors from `seed` and applies them.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = sample.size();
    let t = Transform {
        quarter_turns: if cfg.rotate && h == w { rng.random_range(0..4) } else { 0 },
        hflip: cfg.flip && rng.random_bool(0.5),
        vflip: cfg.flip && rng.random_bool(0.5),
    };
    let mut image = t.image(&sample.image)?;
    if cfg.jitter > 0.0 {
        let brightness = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
        let contrast = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
        let mean = image.sum() / image.numel() as f32;
        image = image.map(|v| (((v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0));
    }
    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.data_mut() {
            *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        name: sample.name.clone(),
        image,
        gt: t.segmentation(&sample.gt),
    })
}
