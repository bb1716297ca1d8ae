//! Centroid matching and the detection/classification scores built on it.

use serde::{Deserialize, Serialize};

use super::hungarian::assign;

pub const DEFAULT_RADIUS: f64 = 12.0;

/// An instance reduced to its mask centroid `(row, col)` and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub row: f64,
    pub col: f64,
    pub class: u32,
}

impl Centroid {
    pub fn distance(&self, other: &Centroid) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }
}

/// `(gt index, pred index)` pairs within `radius`, one-to-one, with the most
/// pairs and, among those, the least total distance.
pub fn match_centroids(gt: &[Centroid], pred: &[Centroid], radius: f64) -> Vec<(usize, usize)> {
    assign(
        gt.len(),
        pred.len(),
        |i, j| gt[i].distance(&pred[j]),
        |i, j| gt[i].distance(&pred[j]) <= radius,
    )
}

/// `(K + 1) × (K + 1)` counts; row = ground-truth class, column = predicted
/// class, index 0 = background (unmatched).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes + 1]; num_classes + 1],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len() - 1
    }

    /// Adds one image's matching.
    pub fn add(&mut self, gt: &[Centroid], pred: &[Centroid], pairs: &[(usize, usize)]) {
        let mut gt_hit = vec![false; gt.len()];
        let mut pred_hit = vec![false; pred.len()];
        for &(g, p) in pairs {
            gt_hit[g] = true;
            pred_hit[p] = true;
            self.counts[gt[g].class as usize][pred[p].class as usize] += 1;
        }
        for (g, _) in gt_hit.iter().enumerate().filter(|(_, &h)| !h) {
            self.counts[gt[g].class as usize][0] += 1;
        }
        for (p, _) in pred_hit.iter().enumerate().filter(|(_, &h)| !h) {
            self.counts[0][pred[p].class as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn matched(&self) -> u64 {
        self.counts.iter().skip(1).map(|r| r.iter().skip(1).sum::<u64>()).sum()
    }

    pub fn unmatched_gt(&self) -> u64 {
        self.counts.iter().skip(1).map(|r| r[0]).sum()
    }

    pub fn unmatched_pred(&self) -> u64 {
        self.counts[0].iter().skip(1).sum()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |k: usize| {
            if k == 0 {
                "background".to_string()
            } else {
                class_names.get(k - 1).cloned().unwrap_or_else(|| format!("class{k}"))
            }
        };
        let n = self.counts.len();
        let mut s = String::from("gt\\pred");
        for k in 0..n {
            s.push(',');
            s.push_str(&name(k));
        }
        s.push('\n');
        for (k, row) in self.counts.iter().enumerate() {
            s.push_str(&name(k));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// F1 from precision and recall; 0/0 → 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Class-agnostic detection scores; with no ground truth and no prediction
/// every score is 1.
pub fn detection_scores(cm: &ConfusionMatrix) -> DetectionScores {
    let tp = cm.matched();
    let fp = cm.unmatched_pred();
    let fn_ = cm.unmatched_gt();
    let (t, p, g) = (tp as f64, (tp + fp) as f64, (tp + fn_) as f64);
    let empty = tp + fp + fn_ == 0;
    let precision = ratio(t, p).unwrap_or(if empty { 1.0 } else { 0.0 });
    let recall = ratio(t, g).unwrap_or(if empty { 1.0 } else { 0.0 });
    DetectionScores {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1: if empty { 1.0 } else { 2.0 * t / (2.0 * t + fp as f64 + fn_ as f64) },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: u32,
    pub name: String,
    /// Ground-truth instances of this class.
    pub support: u64,
    pub present: bool,
    /// Matched pairs where both sides carry this class.
    pub tp: u64,
    /// Predictions of this class that are unmatched or matched to another class.
    pub fp: u64,
    /// Ground truth of this class that is unmatched or matched to another class.
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Classification F-score of the HoVer-Net protocol, which folds in
    /// true negatives among matched pairs and weights detection misses by ½.
    pub f_c: Option<f64>,
}

pub fn class_scores(cm: &ConfusionMatrix, class_names: &[String]) -> Vec<ClassScores> {
    let k = cm.num_classes();
    (1..=k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let pred_c: u64 = cm.counts.iter().map(|r| r[c]).sum();
            let gt_c: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp as f64, pred_c as f64);
            let recall = ratio(tp as f64, gt_c as f64);
            let f = match (precision, recall) {
                (Some(p), Some(r)) => Some(f1(p, r)),
                (None, Some(_)) => Some(0.0),
                _ => None,
            };
            // Matched-pair confusion for class c.
            let mut tn = 0u64;
            let mut fp_c = 0u64;
            let mut fn_c = 0u64;
            for g in 1..=k {
                for p in 1..=k {
                    let v = cm.counts[g][p];
                    match (g == c, p == c) {
                        (false, false) => tn += v,
                        (false, true) => fp_c += v,
                        (true, false) => fn_c += v,
                        (true, true) => {}
                    }
                }
            }
            let fp_d = cm.counts[0][c];
            let fn_d = cm.counts[c][0];
            let num = 2.0 * (tp + tn) as f64;
            let den = num + 2.0 * (fp_c + fn_c) as f64 + (fp_d + fn_d) as f64;
            ClassScores {
                class: c as u32,
                name: class_names.get(c - 1).cloned().unwrap_or_else(|| format!("class{c}")),
                support: gt_c,
                present: gt_c > 0,
                tp,
                fp: pred_c - tp,
                fn_: gt_c - tp,
                precision,
                recall,
                f1: f,
                f_c: if gt_c > 0 { ratio(num, den) } else { None },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(row: f64, col: f64, class: u32) -> Centroid {
        Centroid { row, col, class }
    }

    #[test]
    fn radius_rule() {
        assert_eq!(match_centroids(&[c(0.0, 0.0, 1)], &[c(0.0, 12.0, 1)], 12.0), vec![(0, 0)]);
        assert!(match_centroids(&[c(0.0, 0.0, 1)], &[c(0.0, 13.0, 1)], 12.0).is_empty());
    }

    #[test]
    fn confusion_counting() {
        let gt = [c(0.0, 0.0, 1), c(50.0, 50.0, 2), c(90.0, 90.0, 2)];
        let pred = [c(1.0, 1.0, 2), c(50.0, 51.0, 2), c(200.0, 0.0, 1)];
        let pairs = match_centroids(&gt, &pred, 12.0);
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&gt, &pred, &pairs);
        assert_eq!(cm.counts[1][2], 1);
        assert_eq!(cm.counts[2][2], 1);
        assert_eq!(cm.counts[2][0], 1);
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.total(), 3 + 1);
        let d = detection_scores(&cm);
        assert_eq!((d.tp, d.fp, d.fn_), (2, 1, 1));
        let s = class_scores(&cm, &[]);
        assert_eq!(s[1].tp, 1);
        assert_eq!(s[1].precision, Some(0.5));
        assert_eq!(s[0].f1, Some(0.0));
    }
}
