//! Evaluation: box/mask overlap, AP@0.5, centroid P/R/F1, PQ, dice and the
//! confusion matrix, gathered into one report.

pub mod ap;
pub mod centroid;
pub mod hungarian;
pub mod pq;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{BBox, GtBox};
use crate::error::{Error, Result};
use crate::instance::InstanceSegmentation;
use crate::postprocess::Detection;

pub use ap::{average_precision, mean_average_precision};
pub use centroid::{class_scores, detection_scores, match_centroids, Centroid, ClassScores, ConfusionMatrix, DetectionScores};
pub use hungarian::assign;
pub use pq::{MpqAveraging, PqStats};

pub const AP_IOU: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

fn overlap_counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    assert_eq!(a.len(), b.len(), "mask shapes differ");
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    (inter, na, nb)
}

/// `|A ∩ B| / |A ∪ B|`; 0 for two empty masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (i, na, nb) = overlap_counts(a, b);
    let u = na + nb - i;
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// `2|A ∩ B| / (|A| + |B|)`; 1 for two empty masks.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let (i, na, nb) = overlap_counts(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// AP and centroid detection/classification scores.
    Bbox,
    /// bPQ, mPQ and dice.
    Pq,
    #[default]
    Full,
}

impl EvalMode {
    fn boxes(self) -> bool {
        matches!(self, EvalMode::Bbox | EvalMode::Full)
    }

    fn masks(self) -> bool {
        matches!(self, EvalMode::Pq | EvalMode::Full)
    }
}

/// One image's predictions: post-suppression detections (ranked for AP) and
/// the instance map assembled from their masks.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub detections: Vec<Detection>,
    pub segmentation: InstanceSegmentation,
}

fn centroids(seg: &InstanceSegmentation) -> Vec<Centroid> {
    seg.instances()
        .iter()
        .map(|i| Centroid {
            row: i.centroid.0,
            col: i.centroid.1,
            class: i.class,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub radius: f64,
    pub iou: f64,
    pub mpq: MpqAveraging,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            radius: centroid::DEFAULT_RADIUS,
            iou: AP_IOU,
            mpq: MpqAveraging::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub images: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Per-class mean for K > 1, class-agnostic for K = 1.
    pub ap: Option<f64>,
    pub ap_class_agnostic: Option<f64>,
    pub ap_per_class: Vec<Option<f64>>,
    pub detection: Option<DetectionScores>,
    pub per_class: Vec<ClassScores>,
    pub bpq: Option<f64>,
    pub mpq: Option<f64>,
    pub dice: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if let Some(cm) = &self.confusion {
            let path = dir.join("confusion.csv");
            std::fs::write(&path, cm.to_csv(&self.class_names)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Human-readable summary, absent classes marked n/a.
    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "images {}  AP@0.5 {}  bPQ {}  mPQ {}  dice {}\n",
            self.images,
            f(self.ap),
            f(self.bpq),
            f(self.mpq),
            f(self.dice)
        );
        if let Some(d) = &self.detection {
            s += &format!(
                "detection  P {:.4}  R {:.4}  F1 {:.4}  (TP {} FP {} FN {})\n",
                d.precision, d.recall, d.f1, d.tp, d.fp, d.fn_
            );
        }
        for c in &self.per_class {
            s += &format!(
                "{:<14} P {}  R {}  F1 {}  Fc {}  support {}\n",
                c.name,
                f(c.precision),
                f(c.recall),
                f(c.f1),
                f(c.f_c),
                c.support
            );
        }
        s
    }
}

/// Evaluates predictions against ground truth, image by image.
pub fn evaluate(
    preds: &[ImagePrediction],
    gts: &[InstanceSegmentation],
    num_classes: usize,
    class_names: &[String],
    mode: EvalMode,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!("{} predictions for {} images", preds.len(), gts.len())));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if (p.segmentation.height, p.segmentation.width) != (g.height, g.width) {
            return Err(Error::Invalid(format!("image {i}: prediction and ground truth sizes differ")));
        }
    }
    let class_names: Vec<String> = (1..=num_classes)
        .map(|k| class_names.get(k - 1).cloned().unwrap_or_else(|| format!("class{k}")))
        .collect();
    let mut report = MetricsReport {
        mode,
        images: gts.len(),
        num_classes,
        class_names: class_names.clone(),
        ap: None,
        ap_class_agnostic: None,
        ap_per_class: Vec::new(),
        detection: None,
        per_class: Vec::new(),
        bpq: None,
        mpq: None,
        dice: None,
        confusion: None,
    };
    if mode.boxes() {
        let dets: Vec<Vec<Detection>> = preds.iter().map(|p| p.detections.clone()).collect();
        let boxes: Vec<Vec<GtBox>> = gts
            .iter()
            .map(|g| g.instances().iter().map(|i| GtBox { bbox: i.bbox, class: i.class }).collect())
            .collect();
        report.ap_class_agnostic = average_precision(&dets, &boxes, None, settings.iou);
        let (per, mean) = mean_average_precision(&dets, &boxes, num_classes, settings.iou);
        report.ap_per_class = per;
        report.ap = if num_classes > 1 { mean } else { report.ap_class_agnostic };

        let mut cm = ConfusionMatrix::new(num_classes);
        for (p, g) in preds.iter().zip(gts) {
            let gc = centroids(g);
            let pc = centroids(&p.segmentation);
            cm.add(&gc, &pc, &match_centroids(&gc, &pc, settings.radius));
        }
        report.detection = Some(detection_scores(&cm));
        report.per_class = class_scores(&cm, &class_names);
        report.confusion = Some(cm);
    }
    if mode.masks() && !gts.is_empty() {
        let n = gts.len() as f64;
        report.bpq = Some(
            preds
                .iter()
                .zip(gts)
                .map(|(p, g)| pq::panoptic_quality_binary(&p.segmentation, g))
                .sum::<f64>()
                / n,
        );
        report.dice = Some(
            preds
                .iter()
                .zip(gts)
                .map(|(p, g)| dice(&p.segmentation.foreground(), &g.foreground()))
                .sum::<f64>()
                / n,
        );
        let pairs: Vec<_> = preds.iter().zip(gts).map(|(p, g)| (&p.segmentation, g)).collect();
        report.mpq = pq::multiclass_pq(&pairs, num_classes, settings.mpq);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_hand_values() {
        let mut a = vec![false; 200];
        let mut b = vec![false; 200];
        a[..100].fill(true);
        b[50..150].fill(true);
        assert_eq!(dice(&a, &b), 0.5);
        assert_eq!(dice(&a, &a), 1.0);
        let not_a: Vec<bool> = a.iter().map(|&x| !x).collect();
        assert_eq!(dice(&a, &not_a), 0.0);
        assert_eq!(dice(&[false; 4], &[false; 4]), 1.0);
    }
}
