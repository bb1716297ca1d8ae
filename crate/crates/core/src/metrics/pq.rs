//! Panoptic quality over instance maps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::instance::InstanceSegmentation;

/// Additive PQ statistics; merge by summing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqStats {
    /// `Σ IoU / (TP + ½FP + ½FN)`; 1 when there is nothing on either side.
    pub fn pq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if den == 0.0 {
            1.0
        } else {
            self.iou_sum / den
        }
    }

    pub fn merge(&mut self, o: &PqStats) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }
}

/// Matches segments with IoU > 0.5 (unique by construction) among the
/// instances accepted by the two filters.
pub fn pq_stats_filtered(
    pred: &InstanceSegmentation,
    gt: &InstanceSegmentation,
    keep_pred: impl Fn(u32) -> bool,
    keep_gt: impl Fn(u32) -> bool,
) -> PqStats {
    assert_eq!(pred.ids.len(), gt.ids.len(), "panoptic_quality: shape mismatch");
    let pa = pred.areas();
    let ga = gt.areas();
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let mut pairs: Vec<((u32, u32), u64)> = inter.into_iter().collect();
    pairs.sort_unstable();
    let mut s = PqStats::default();
    for ((g, p), i) in pairs {
        if !keep_gt(g) || !keep_pred(p) {
            continue;
        }
        let union = ga[g as usize - 1] as u64 + pa[p as usize - 1] as u64 - i;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            s.tp += 1;
            s.iou_sum += iou;
        }
    }
    let n_gt = (1..=gt.num_instances() as u32).filter(|&g| keep_gt(g)).count() as u64;
    let n_pred = (1..=pred.num_instances() as u32).filter(|&p| keep_pred(p)).count() as u64;
    s.fn_ = n_gt - s.tp;
    s.fp = n_pred - s.tp;
    s
}

/// Class-agnostic statistics.
pub fn binary_stats(pred: &InstanceSegmentation, gt: &InstanceSegmentation) -> PqStats {
    pq_stats_filtered(pred, gt, |_| true, |_| true)
}

/// Statistics restricted to one class on both sides.
pub fn class_stats(pred: &InstanceSegmentation, gt: &InstanceSegmentation, class: u32) -> PqStats {
    pq_stats_filtered(pred, gt, |p| pred.class_of(p) == class, |g| gt.class_of(g) == class)
}

/// How multiclass PQ is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpqAveraging {
    /// Per-class statistics pooled over the dataset, averaged over classes
    /// present in the ground truth.
    #[default]
    DatasetPerClass,
    /// Per image, average over classes present in that image's ground truth;
    /// then average over images with ground truth.
    PerImage,
}

pub fn panoptic_quality_binary(pred: &InstanceSegmentation, gt: &InstanceSegmentation) -> f64 {
    binary_stats(pred, gt).pq()
}

/// Dataset mPQ; `None` when no ground-truth instance exists.
pub fn multiclass_pq(pairs: &[(&InstanceSegmentation, &InstanceSegmentation)], num_classes: usize, averaging: MpqAveraging) -> Option<f64> {
    let present = |gt: &InstanceSegmentation, c: u32| gt.classes.contains(&c);
    match averaging {
        MpqAveraging::DatasetPerClass => {
            let mut per = vec![PqStats::default(); num_classes];
            let mut seen = vec![false; num_classes];
            for (pred, gt) in pairs {
                for c in 1..=num_classes as u32 {
                    per[c as usize - 1].merge(&class_stats(pred, gt, c));
                    seen[c as usize - 1] |= present(gt, c);
                }
            }
            let vals: Vec<f64> = per.iter().zip(&seen).filter(|(_, &s)| s).map(|(p, _)| p.pq()).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
        MpqAveraging::PerImage => {
            let vals: Vec<f64> = pairs
                .iter()
                .filter_map(|(pred, gt)| {
                    let cs: Vec<f64> = (1..=num_classes as u32)
                        .filter(|&c| present(gt, c))
                        .map(|c| class_stats(pred, gt, c).pq())
                        .collect();
                    (!cs.is_empty()).then(|| cs.iter().sum::<f64>() / cs.len() as f64)
                })
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(ids: Vec<u32>, classes: Vec<u32>) -> InstanceSegmentation {
        InstanceSegmentation::new(1, ids.len(), ids, classes, None).unwrap()
    }

    #[test]
    fn hand_values() {
        // GT 5 pixels, pred 4 of them: IoU 0.8.
        let gt = seg(vec![1, 1, 1, 1, 1, 0], vec![1]);
        let pred = seg(vec![1, 1, 1, 1, 0, 0], vec![1]);
        assert!((panoptic_quality_binary(&pred, &gt) - 0.8).abs() < 1e-12);
        assert_eq!(panoptic_quality_binary(&gt, &gt), 1.0);
        // IoU 2/5 = 0.4 → unmatched.
        let gt = seg(vec![1, 1, 1, 1, 0], vec![1]);
        let pred = seg(vec![0, 0, 1, 1, 1], vec![1]);
        assert_eq!(panoptic_quality_binary(&pred, &gt), 0.0);
        let empty = seg(vec![0; 3], vec![]);
        assert_eq!(panoptic_quality_binary(&empty, &empty), 1.0);
        assert_eq!(panoptic_quality_binary(&seg(vec![1, 0, 0], vec![1]), &empty), 0.0);
    }
}
