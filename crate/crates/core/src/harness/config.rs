use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{EncoderSource, ModelConfig};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::metrics::MpqAveraging;
use crate::postprocess::{MaskMode, DEFAULT_MAX_DETECTIONS, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};

/// Thresholds applied after the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    /// Minimum score of a ranked detection (used for AP).
    pub score_threshold: f32,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Minimum score for a detection to become a mask prompt.
    pub prompt_threshold: f32,
    pub mask_mode: MaskMode,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            max_detections: DEFAULT_MAX_DETECTIONS,
            prompt_threshold: 0.4,
            mask_mode: MaskMode::Ellipse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Training dataset root.
    pub data: PathBuf,
    /// Optional held-out dataset evaluated at the end of training.
    pub test_data: Option<PathBuf>,
    /// Run directory.
    pub out: PathBuf,
    pub encoder: EncoderSource,
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the training data held out for plateau monitoring.
    pub validation_fraction: f64,
    pub augment: AugmentConfig,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub post: PostConfig,
    pub mpq_averaging: MpqAveraging,
    /// Overlay PNGs written per evaluation.
    pub overlays: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data"),
            test_data: None,
            out: PathBuf::from("runs/default"),
            encoder: EncoderSource::Toy { seed: 7 },
            model: ModelConfig::toy(256, 16, 32, 64, 5),
            epochs: 50,
            lr: 3e-4,
            lr_floor: 3e-7,
            plateau_factor: 0.1,
            plateau_patience: 5,
            batch_size: 8,
            seed: 0,
            validation_fraction: 0.1,
            augment: AugmentConfig::default(),
            focal_alpha: crate::detect::loss::FOCAL_ALPHA,
            focal_gamma: crate::detect::loss::FOCAL_GAMMA,
            post: PostConfig::default(),
            mpq_averaging: MpqAveraging::default(),
            overlays: 8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.lr) {
            return bad("need 0 < lr_floor <= lr");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must be in (0, 1)");
        }
        // Batch norm over the 1×1 top level needs two samples.
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.post.score_threshold) || !(0.0..=1.0).contains(&self.post.prompt_threshold) {
            return bad("score thresholds must be in [0, 1]");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
