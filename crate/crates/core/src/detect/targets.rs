//! Anchor-to-ground-truth assignment.

use super::boxes::{encode_deltas, BBox};
use crate::error::{Error, Result};

pub const FOREGROUND_IOU: f64 = 0.5;
pub const BACKGROUND_IOU: f64 = 0.4;

pub const IGNORE: i32 = -1;
pub const BACKGROUND: i32 = 0;

/// Per-anchor labels (−1 ignore, 0 background, 1..K class) and regression
/// targets, which are meaningful only where the label is ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTargets {
    pub labels: Vec<i32>,
    pub deltas: Vec<[f32; 4]>,
}

impl BoxTargets {
    pub fn positive(&self, i: usize) -> bool {
        self.labels[i] >= 1
    }

    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 1).count()
    }
}

/// A ground-truth box with its 1-based class id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: u32,
}

/// IoU ≥ 0.5 → foreground of the best-overlap box, < 0.4 → background,
/// otherwise ignored; each ground-truth box also claims its single
/// highest-IoU anchor.
pub fn match_anchors(anchors: &[BBox], gt: &[GtBox]) -> Result<BoxTargets> {
    for (i, g) in gt.iter().enumerate() {
        if !g.bbox.is_valid() {
            return Err(Error::Invalid(format!(
                "ground-truth box {i} is degenerate: {:?}",
                g.bbox
            )));
        }
        if g.class == 0 {
            return Err(Error::Invalid(format!("ground-truth box {i} has class 0")));
        }
    }
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gt.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            // Cheap reject before the full IoU.
            if a.x2 <= g.bbox.x1 || g.bbox.x2 <= a.x1 || a.y2 <= g.bbox.y1 || g.bbox.y2 <= a.y1 {
                continue;
            }
            let iou = a.iou(&g.bbox);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
            if iou > gt_best[gi].0 {
                gt_best[gi] = (iou, ai);
            }
        }
    }
    let mut labels = vec![BACKGROUND; n];
    let mut assigned = vec![usize::MAX; n];
    for ai in 0..n {
        if best_iou[ai] >= FOREGROUND_IOU {
            labels[ai] = gt[best_gt[ai]].class as i32;
            assigned[ai] = best_gt[ai];
        } else if best_iou[ai] >= BACKGROUND_IOU {
            labels[ai] = IGNORE;
        }
    }
    for (gi, &(iou, ai)) in gt_best.iter().enumerate() {
        if ai != usize::MAX && iou > 0.0 {
            labels[ai] = gt[gi].class as i32;
            assigned[ai] = gi;
        }
    }
    let deltas = (0..n)
        .map(|ai| match assigned[ai] {
            usize::MAX => [0.0; 4],
            gi => encode_deltas(&anchors[ai], &gt[gi].bbox).map(|v| v as f32),
        })
        .collect();
    Ok(BoxTargets { labels, deltas })
}
