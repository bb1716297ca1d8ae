//! Brute-force references, written without the library's matching code.

use autoprompt::detect::{BBox, GtBox};
use autoprompt::instance::InstanceSegmentation;
use autoprompt::postprocess::Detection;
use rand::Rng;

/// Integer box coordinates so overlap ratios are exact rationals.
pub fn int_box<R: Rng>(rng: &mut R, extent: i32, max_side: i32) -> BBox {
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    let x = rng.random_range(0..=extent - w);
    let y = rng.random_range(0..=extent - h);
    BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32)
}

fn int_parts(b: &BBox) -> [i64; 4] {
    [b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64]
}

/// `(intersection, union)` of two integer boxes.
pub fn overlap_int(a: &BBox, b: &BBox) -> (i64, i64) {
    let [ax1, ay1, ax2, ay2] = int_parts(a);
    let [bx1, by1, bx2, by2] = int_parts(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0);
    let i = iw * ih;
    (i, (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - i)
}

/// Repeatedly take the best remaining box (score, then lowest index) and
/// strike every same-class box overlapping it by more than `num/den`.
pub fn nms_reference(dets: &[Detection], num: i64, den: i64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for j in 0..dets.len() {
            if alive[j] && dets[j].class == dets[b].class {
                let (i, u) = overlap_int(&dets[j].bbox, &dets[b].bbox);
                if i * den > num * u {
                    alive[j] = false;
                }
            }
        }
    }
    out
}

/// Every partial one-to-one matching of `rows × cols` over allowed pairs;
/// returns the best `(pair count, total cost)` — most pairs, then least cost.
pub fn best_matching(rows: usize, cols: usize, cost: &dyn Fn(usize, usize) -> f64, allowed: &dyn Fn(usize, usize) -> bool) -> (usize, f64) {
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        used: &mut Vec<bool>,
        cost: &dyn Fn(usize, usize) -> f64,
        allowed: &dyn Fn(usize, usize) -> bool,
    ) -> (usize, f64) {
        if r == rows {
            return (0, 0.0);
        }
        let mut best = rec(r + 1, rows, cols, used, cost, allowed);
        for c in 0..cols {
            if !used[c] && allowed(r, c) {
                used[c] = true;
                let (n, s) = rec(r + 1, rows, cols, used, cost, allowed);
                used[c] = false;
                let cand = (n + 1, s + cost(r, c));
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                }
            }
        }
        best
    }
    rec(0, rows, cols, &mut vec![false; cols], cost, allowed)
}

/// AP recomputed from scratch at every rank cut-off: the top-k detections
/// are matched greedily, precision/recall read off, and the area summed with
/// the best precision at any equal-or-higher recall. Scores must be distinct.
pub fn ap_reference(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], iou_thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut all: Vec<(usize, Detection)> = dets.iter().enumerate().flat_map(|(i, d)| d.iter().map(move |x| (i, *x))).collect();
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut pr = Vec::new();
    for k in 1..=all.len() {
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, d) in &all[..k] {
            let mut best = (iou_thr, None);
            for (j, g) in gts[*img].iter().enumerate() {
                let (i, u) = overlap_int(&d.bbox, &g.bbox);
                let v = i as f64 / u as f64;
                if !taken[*img][j] && v >= best.0 && (best.1.is_none() || v > best.0) {
                    best = (v, Some(j));
                }
            }
            if let (_, Some(j)) = best {
                taken[*img][j] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (k, &(r, _)) in pr.iter().enumerate() {
        let p = pr[k..].iter().map(|x| x.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

/// Random instance map: rectangles painted in order over a `size²` grid,
/// then relabelled densely (overwritten rectangles vanish).
pub fn random_segmentation<R: Rng>(rng: &mut R, size: usize, max_objects: usize, classes: u32) -> InstanceSegmentation {
    let mut raw = vec![0u32; size * size];
    let n = rng.random_range(0..=max_objects);
    for k in 1..=n as u32 {
        let w = rng.random_range(2..=size / 2);
        let h = rng.random_range(2..=size / 2);
        let x = rng.random_range(0..=size - w);
        let y = rng.random_range(0..=size - h);
        for r in y..y + h {
            for c in x..x + w {
                raw[r * size + c] = k;
            }
        }
    }
    let mut map = vec![0u32; n + 1];
    let mut next = 0;
    let mut ids = vec![0u32; raw.len()];
    for (o, &r) in ids.iter_mut().zip(&raw) {
        if r > 0 {
            if map[r as usize] == 0 {
                next += 1;
                map[r as usize] = next;
            }
            *o = map[r as usize];
        }
    }
    let cls = (0..next).map(|_| rng.random_range(1..=classes)).collect();
    InstanceSegmentation::new(size, size, ids, cls, None).unwrap()
}

/// Reference PQ for one image: all partial matchings over pairs with
/// IoU > 0.5, maximizing the matched count and then the IoU sum.
pub fn pq_reference(pred: &InstanceSegmentation, gt: &InstanceSegmentation) -> f64 {
    let ng = gt.num_instances();
    let np = pred.num_instances();
    let iou = |g: usize, p: usize| {
        let a = gt.mask(g as u32 + 1);
        let b = pred.mask(p as u32 + 1);
        let i = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let u = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        i as f64 / u as f64
    };
    let table: Vec<Vec<f64>> = (0..ng).map(|g| (0..np).map(|p| iou(g, p)).collect()).collect();
    let (tp, neg) = best_matching(ng, np, &|g, p| -table[g][p], &|g, p| table[g][p] > 0.5);
    let den = tp as f64 + 0.5 * ((ng - tp) + (np - tp)) as f64;
    if den == 0.0 {
        1.0
    } else {
        -neg / den
    }
}
