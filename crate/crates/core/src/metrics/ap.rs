//! Average precision at a single IoU threshold.

use crate::detect::GtBox;
use crate::postprocess::Detection;

/// True/false-positive flag of each detection, in the order detections are
/// ranked (descending score, ties by image then position).
pub fn rank_and_match(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class: Option<u32>, iou_thr: f64) -> (Vec<bool>, usize) {
    let keep = |c: u32| class.is_none_or(|k| k == c);
    let mut ranked: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().enumerate().filter(|(_, d)| keep(d.class)).map(move |(i, _)| (img, i)))
        .collect();
    ranked.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score).then(a.cmp(b)));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().flatten().filter(|g| keep(g.class)).count();
    let flags = ranked
        .iter()
        .map(|&(img, i)| {
            let d = &dets[img][i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.get(img).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
                if taken[img][j] || !keep(g.class) {
                    continue;
                }
                let iou = d.bbox.iou(&g.bbox);
                if iou >= iou_thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

/// All-point interpolated area under the precision–recall curve of a ranked
/// TP/FP sequence. `None` when there is no ground truth.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right.
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// AP for one class (`Some(k)`) or class-agnostic (`None`).
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class: Option<u32>, iou_thr: f64) -> Option<f64> {
    let (flags, n_gt) = rank_and_match(dets, gts, class, iou_thr);
    ap_from_flags(&flags, n_gt)
}

/// Per-class AP for classes `1..=k` and their mean over classes with ground truth.
pub fn mean_average_precision(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], k: usize, iou_thr: f64) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (1..=k as u32).map(|c| average_precision(dets, gts, Some(c), iou_thr)).collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}
