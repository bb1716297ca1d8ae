#![allow(dead_code)]

use autoprompt::decoder::{Combine, SkipMode};
use autoprompt::detect::{detection_loss, focal_loss, box_loss, match_anchors, BBox, FocalParams, GtBox};
use autoprompt::gradcheck::{check, GradCheckReport, DEFAULT_EPS};
use autoprompt::harness::{Detector, ModelConfig};
use autoprompt::kernels::conv_extent;
use autoprompt::layers::{BatchNorm2d, Conv2d, Init, LayerSpec};
use autoprompt::{ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay clear of ±ε.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

const PRIMITIVES: [&str; 10] = [
    "conv", "batchnorm-train", "batchnorm-eval", "relu", "upsample", "add", "concat", "flatten", "focal", "smooth-l1",
];

/// One primitive gradient check, chosen by `index`, with random sizes.
pub fn primitive_case(index: usize, seed: u64) -> Result<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = PRIMITIVES[index % PRIMITIVES.len()];
    let mut store = ParamStore::<f64>::new();
    let n = rng.random_range(1..=2usize);
    let c = rng.random_range(1..=3usize);
    let h = rng.random_range(2..=5usize);
    let w = rng.random_range(2..=5usize);
    let mut name = kind.to_string();
    let report = match kind {
        "conv" => {
            // Pick a kernel/stride/padding whose extent is exact.
            let (k, s, p, hh, ww) = loop {
                let k = rng.random_range(1..=4usize);
                let s = rng.random_range(1..=2usize);
                let p = rng.random_range(0..=k / 2);
                let hh = rng.random_range(k.max(2)..=6);
                let ww = rng.random_range(k.max(2)..=6);
                if conv_extent(hh, k, s, p).is_some() && conv_extent(ww, k, s, p).is_some() {
                    break (k, s, p, hh, ww);
                }
            };
            let cout = rng.random_range(1..=3usize);
            let bias = rng.random_bool(0.7);
            name = format!("conv k{k} s{s} p{p} {c}->{cout} {hh}x{ww} bias={bias}");
            let x = store.add("x", rand_tensor(&mut rng, &[n, c, hh, ww]), true);
            let conv = Conv2d::new(
                &mut store,
                "conv",
                LayerSpec::Conv2d { in_channels: c, out_channels: cout, kernel: k, stride: s, padding: p },
                bias,
                Init::HeUniform,
                true,
                &mut rng,
            )?;
            if let Some(b) = conv.bias {
                store.get_mut(b).value = rand_tensor(&mut rng, &[cout]);
            }
            let ho = conv_extent(hh, k, s, p).unwrap();
            let wo = conv_extent(ww, k, s, p).unwrap();
            let weights = rand_tensor(&mut rng, &[n, cout, ho, wo]);
            check(&mut store, true, DEFAULT_EPS, 6, &mut rng, |tape, st| {
                let xv = tape.param(st, x);
                let y = conv.forward(tape, st, xv)?;
                tape.dot(y, weights.clone())
            })?
        }
        "batchnorm-train" | "batchnorm-eval" => {
            let train = kind == "batchnorm-train";
            let n = if train { 2 } else { n };
            let x = store.add("x", rand_tensor(&mut rng, &[n, c, h, w]), true);
            let bn = BatchNorm2d::new(&mut store, "bn", c);
            store.get_mut(bn.gamma).value = Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5));
            store.get_mut(bn.beta).value = rand_tensor(&mut rng, &[c]);
            if !train {
                *store.buffer_mut(bn.running_mean) = rand_tensor(&mut rng, &[c]);
                *store.buffer_mut(bn.running_var) = Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0));
            }
            let weights = rand_tensor(&mut rng, &[n, c, h, w]);
            check(&mut store, train, DEFAULT_EPS, 8, &mut rng, |tape, st| {
                let xv = tape.param(st, x);
                let y = bn.forward(tape, st, xv)?;
                tape.dot(y, weights.clone())
            })?
        }
        "relu" => {
            let x = store.add("x", rand_tensor_off_zero(&mut rng, &[n, c, h, w]), true);
            let weights = rand_tensor(&mut rng, &[n, c, h, w]);
            check(&mut store, true, DEFAULT_EPS, 12, &mut rng, |tape, st| {
                let xv = tape.param(st, x);
                let y = tape.relu(xv);
                tape.dot(y, weights.clone())
            })?
        }
        "upsample" => {
            let x = store.add("x", rand_tensor(&mut rng, &[n, c, h, w]), true);
            let weights = rand_tensor(&mut rng, &[n, c, 2 * h, 2 * w]);
            check(&mut store, true, DEFAULT_EPS, 12, &mut rng, |tape, st| {
                let xv = tape.param(st, x);
                let y = tape.upsample2x(xv)?;
                tape.dot(y, weights.clone())
            })?
        }
        "add" => {
            let a = store.add("a", rand_tensor(&mut rng, &[n, c, h, w]), true);
            let b = store.add("b", rand_tensor(&mut rng, &[n, c, h, w]), true);
            let weights = rand_tensor(&mut rng, &[n, c, h, w]);
            check(&mut store, true, DEFAULT_EPS, 12, &mut rng, |tape, st| {
                let (av, bv) = (tape.param(st, a), tape.param(st, b));
                let y = tape.add(av, bv)?;
                // Reuse one input twice to exercise gradient accumulation.
                let y = tape.add(y, av)?;
                tape.dot(y, weights.clone())
            })?
        }
        "concat" => {
            let parts: Vec<usize> = (0..rng.random_range(2..=3)).map(|_| rng.random_range(1..=3)).collect();
            let ids: Vec<_> = parts
                .iter()
                .enumerate()
                .map(|(i, &ci)| store.add(format!("x{i}"), rand_tensor(&mut rng, &[n, ci, h, w]), true))
                .collect();
            let total: usize = parts.iter().sum();
            let weights = rand_tensor(&mut rng, &[n, total, h, w]);
            check(&mut store, true, DEFAULT_EPS, 12, &mut rng, |tape, st| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
                let y = tape.concat_channels(&vars)?;
                tape.dot(y, weights.clone())
            })?
        }
        "flatten" => {
            let per = rng.random_range(1..=4usize);
            let a = rng.random_range(1..=3usize);
            let sizes = [(h, w), (h.div_ceil(2), w.div_ceil(2))];
            let ids: Vec<_> = sizes
                .iter()
                .enumerate()
                .map(|(i, &(hh, ww))| store.add(format!("l{i}"), rand_tensor(&mut rng, &[n, a * per, hh, ww]), true))
                .collect();
            let total: usize = sizes.iter().map(|(hh, ww)| a * hh * ww).sum();
            let weights = rand_tensor(&mut rng, &[n, total, per]);
            check(&mut store, true, DEFAULT_EPS, 12, &mut rng, |tape, st| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
                let y = tape.flatten_anchors(&vars, per)?;
                tape.dot(y, weights.clone())
            })?
        }
        "focal" => {
            let anchors = rng.random_range(3..=12usize);
            let k = rng.random_range(1..=3usize);
            let gamma = [0.0, 1.0, 2.0, 2.5][rng.random_range(0..4)];
            let alpha = rng.random_range(0.1..0.9);
            name = format!("focal A{anchors} K{k} alpha={alpha:.2} gamma={gamma}");
            let labels: Vec<i32> = (0..anchors).map(|_| rng.random_range(-1..=k as i32)).collect();
            let x = store.add("logits", Tensor::from_fn(&[1, anchors, k], |_| rng.random_range(-4.0..4.0)), true);
            let params = FocalParams { alpha, gamma };
            check(&mut store, true, DEFAULT_EPS, 12, &mut rng, |tape, st| {
                let xv = tape.param(st, x);
                let out = focal_loss(tape.value(xv).data(), &labels, k, params);
                tape.record_kinks(out.kinks.iter().copied());
                let shape = tape.value(xv).shape().to_vec();
                tape.loss(xv, out.value, Tensor::new(&shape, out.grad)?)
            })?
        }
        _ => {
            let anchors = rng.random_range(3..=12usize);
            let labels: Vec<i32> = (0..anchors).map(|_| rng.random_range(-1..=2)).collect();
            let target: Vec<[f32; 4]> = (0..anchors)
                .map(|_| [0; 4].map(|_| rng.random_range(-1.0f32..1.0)))
                .collect();
            let x = store.add("deltas", rand_tensor(&mut rng, &[1, anchors, 4]), true);
            check(&mut store, true, DEFAULT_EPS, 12, &mut rng, |tape, st| {
                let xv = tape.param(st, x);
                let out = box_loss(tape.value(xv).data(), &target, &labels, 1.0 / 9.0);
                tape.record_kinks(out.kinks.iter().copied());
                let shape = tape.value(xv).shape().to_vec();
                tape.loss(xv, out.value, Tensor::new(&shape, out.grad)?)
            })?
        }
    };
    Ok((name, report))
}

/// Decoder + head + detection loss end to end on a tiny model.
pub fn composed_case(combine: Combine, skip: SkipMode, seed: u64) -> Result<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::toy(64, 4, 2, 3, 2);
    cfg.decoder.combine = combine;
    cfg.decoder.skip = skip;
    cfg.head_depth = 1;
    let mut det: Detector<f64> = Detector::new(cfg.clone(), seed)?;
    let n = 2;
    let s = cfg.encoder.grid_size();
    let layers: Vec<Tensor<f64>> = (0..cfg.encoder.layer_count)
        .map(|_| rand_tensor(&mut rng, &[n, cfg.encoder.embed_dim, s, s]))
        .collect();
    let targets = (0..n)
        .map(|_| {
            let gt: Vec<GtBox> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let (cx, cy) = (rng.random_range(10.0..54.0), rng.random_range(10.0..54.0));
                    let (bw, bh) = (rng.random_range(6.0..20.0), rng.random_range(6.0..20.0));
                    GtBox { bbox: BBox::from_center(cx, cy, bw, bh), class: rng.random_range(1..=2) }
                })
                .collect();
            match_anchors(&det.anchors.boxes, &gt)
        })
        .collect::<Result<Vec<_>>>()?;
    let decoder = det.decoder.clone();
    let head = det.head.clone();
    let encoder = cfg.encoder.clone();
    let report = check(&mut det.store, true, DEFAULT_EPS, 3, &mut rng, |tape: &mut Tape<f64>, st| {
        let vars: Vec<Var> = layers.iter().map(|t| tape.input(t.clone())).collect();
        let out = autoprompt::harness::model::forward_with(&decoder, &head, &encoder, tape, st, &vars)?;
        Ok(detection_loss(tape, out, &targets, FocalParams::default())?.0)
    })?;
    Ok((format!("decoder+head {combine:?}/{skip:?}"), report))
}

/// At least `primitives` primitive cases plus every decoder wiring.
pub fn gradient_suite(primitives: usize, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for i in 0..primitives {
        out.push(primitive_case(i, seed.wrapping_mul(1000).wrapping_add(i as u64))?);
    }
    for (j, combine) in [Combine::Concat, Combine::Sum].into_iter().enumerate() {
        for (k, skip) in [SkipMode::Chained, SkipMode::Direct, SkipMode::None].into_iter().enumerate() {
            out.push(composed_case(combine, skip, seed + (3 * j + k) as u64)?);
        }
    }
    Ok(out)
}

pub mod reference;

use autoprompt::detect::{decode_deltas, encode_deltas};
use autoprompt::metrics::ap::average_precision;
use autoprompt::metrics::centroid::{match_centroids, Centroid};
use autoprompt::metrics::{dice, mask_iou, pq::panoptic_quality_binary};
use autoprompt::postprocess::{nms, Detection};

/// Random detections on an integer grid with coarse (often tied) scores.
pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, classes: u32) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: reference::int_box(rng, 64, 24),
            class: rng.random_range(1..=classes),
            score: rng.random_range(0..20) as f32 / 20.0,
        })
        .collect()
}

/// Library NMS vs the quadratic reference; returns mismatching set count.
pub fn nms_oracle(sets: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for s in 0..sets {
        let n = rng.random_range(0..=200);
        let dets = random_detections(&mut rng, n, 3);
        let (num, den) = [(1, 2), (3, 10), (7, 10)][s % 3];
        if nms(&dets, num as f64 / den as f64) != reference::nms_reference(&dets, num, den) {
            bad += 1;
        }
    }
    bad
}

/// Centroid matching vs exhaustive enumeration over ≤ 7 points a side.
pub fn hungarian_oracle(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Centroid> {
            (0..rng.random_range(0..=7))
                .map(|_| Centroid { row: rng.random_range(0.0..40.0), col: rng.random_range(0.0..40.0), class: 1 })
                .collect()
        };
        let (g, p) = (pts(&mut rng), pts(&mut rng));
        let radius = 12.0;
        let got = match_centroids(&g, &p, radius);
        let cost: f64 = got.iter().map(|&(i, j)| g[i].distance(&p[j])).sum();
        let valid = got.iter().all(|&(i, j)| g[i].distance(&p[j]) <= radius);
        let (n, best) = reference::best_matching(g.len(), p.len(), &|i, j| g[i].distance(&p[j]), &|i, j| g[i].distance(&p[j]) <= radius);
        if !valid || got.len() != n || (cost - best).abs() > 1e-9 {
            bad += 1;
        }
    }
    bad
}

/// Binary PQ vs enumerating all matchings, ≤ 7 objects per map.
pub fn pq_oracle(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let gt = reference::random_segmentation(&mut rng, 16, 7, 2);
        // Predictions: either independent or a perturbed copy of the truth.
        let pred = if rng.random_bool(0.5) {
            reference::random_segmentation(&mut rng, 16, 7, 2)
        } else {
            let mut ids = gt.ids.clone();
            for v in ids.iter_mut() {
                if rng.random_bool(0.15) {
                    *v = 0;
                }
            }
            dense(16, ids)
        };
        if (panoptic_quality_binary(&pred, &gt) - reference::pq_reference(&pred, &gt)).abs() > 1e-12 {
            bad += 1;
        }
    }
    bad
}

fn dense(size: usize, raw: Vec<u32>) -> InstanceSegmentation {
    let mut map = std::collections::BTreeMap::new();
    for &r in &raw {
        if r > 0 {
            let next = map.len() as u32 + 1;
            map.entry(r).or_insert(next);
        }
    }
    let ids = raw.iter().map(|r| if *r == 0 { 0 } else { map[r] }).collect();
    InstanceSegmentation::new(size, size, ids, vec![1; map.len()], None).unwrap()
}

use autoprompt::detect::GtBox as Gt;
use autoprompt::instance::InstanceSegmentation;

/// AP vs recomputing precision/recall at every cut-off, ≤ 7 objects.
pub fn ap_oracle(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let images = rng.random_range(1..=3);
        let gts: Vec<Vec<Gt>> = (0..images)
            .map(|_| (0..rng.random_range(0..=7)).map(|_| Gt { bbox: reference::int_box(&mut rng, 40, 16), class: 1 }).collect())
            .collect();
        let mut scores: Vec<f32> = (0..images * 7).map(|i| (i + 1) as f32 / 64.0).collect();
        use rand::seq::SliceRandom;
        scores.shuffle(&mut rng);
        let mut next = scores.into_iter();
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                (0..rng.random_range(0..=7))
                    .map(|_| {
                        // Half the detections are jittered copies of a truth box.
                        let bbox = if !g.is_empty() && rng.random_bool(0.5) {
                            let b = g[rng.random_range(0..g.len())].bbox;
                            let d = rng.random_range(-2..=2) as f32;
                            BBox::new(b.x1 + d.min(0.0), b.y1, b.x2 + d.max(0.0), b.y2)
                        } else {
                            reference::int_box(&mut rng, 40, 16)
                        };
                        Detection { bbox, class: 1, score: next.next().unwrap() }
                    })
                    .collect()
            })
            .collect();
        let a = average_precision(&dets, &gts, None, 0.5);
        let b = reference::ap_reference(&dets, &gts, 0.5);
        let same = match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        if !same {
            bad += 1;
        }
    }
    bad
}

/// Largest |dice − 2·IoU/(1+IoU)| over random mask pairs with a nonempty union.
pub fn dice_relation(pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let n = rng.random_range(1..=400);
        let pa = rng.random_range(0.0..1.0);
        let pb = rng.random_range(0.0..1.0);
        let mut a: Vec<bool> = (0..n).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(pb)).collect();
        if !a.iter().chain(&b).any(|&v| v) {
            a[0] = true;
        }
        let i = mask_iou(&a, &b);
        worst = worst.max((dice(&a, &b) - 2.0 * i / (1.0 + i)).abs());
    }
    worst
}

/// Largest coordinate error of decode(encode(gt)) over random box pairs.
pub fn delta_roundtrip(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let rb = |rng: &mut ChaCha8Rng| {
            BBox::from_center(rng.random_range(0.0..256.0), rng.random_range(0.0..256.0), rng.random_range(4.0..128.0), rng.random_range(4.0..128.0))
        };
        let (a, g) = (rb(&mut rng), rb(&mut rng));
        let r = decode_deltas(&a, encode_deltas(&a, &g));
        for (x, y) in [(r.x1, g.x1), (r.y1, g.y1), (r.x2, g.x2), (r.y2, g.y2)] {
            worst = worst.max((x as f64 - y as f64).abs());
        }
    }
    worst
}

use std::path::Path;

use autoprompt::data::{synth_generate, AugmentConfig, SynthConfig as Synth};
use autoprompt::harness::RunConfig;

/// Small synthetic train/test sets at 64×64 under `root`.
pub fn tiny_datasets(root: &Path, train: usize, test: usize) {
    synth_generate(&Synth::new(21, train, 64, 2), &root.join("train")).unwrap();
    synth_generate(&Synth::new(22, test, 64, 2), &root.join("test")).unwrap();
}

/// A 64×64 toy model trained for `epochs` on `root/train`.
pub fn tiny_config(root: &Path, out: &str, epochs: usize) -> RunConfig {
    RunConfig {
        data: root.join("train"),
        test_data: Some(root.join("test")),
        out: root.join(out),
        model: ModelConfig::toy(64, 4, 8, 8, 2),
        epochs,
        batch_size: 4,
        augment: AugmentConfig::default(),
        overlays: 2,
        ..Default::default()
    }
}
