//! One line per acceptance criterion. Runs the full desk-scale training, so
//! expect this target to take most of the test suite's wall time.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use autoprompt::data::{load_dataset, synth_generate, SynthConfig};
use autoprompt::detect::loss::{focal_loss, focal_term, FocalParams};
use autoprompt::detect::{generate_anchors, AnchorConfig};
use autoprompt::gradcheck::DEFAULT_TOL;
use autoprompt::harness::{
    full_config_parameter_report, oracle_prediction, read_checkpoint_manifest, train, EncoderSource, EpochRecord,
    ModelConfig, ReduceOnPlateau, RunConfig, TrainReport,
};
use autoprompt::encoder::{save_embeddings, ToyEncoder};
use autoprompt::data::AugmentConfig;
use autoprompt::metrics::{evaluate, EvalMode, EvalSettings, ImagePrediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&p);
    fs::create_dir_all(&p).unwrap();
    p
}

fn desk_model() -> ModelConfig {
    ModelConfig::toy(128, 8, 32, 32, 2)
}

fn gradients(l: &mut Ledger) {
    let t = Instant::now();
    let suite = common::gradient_suite(50, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let bad: Vec<&String> = suite.iter().filter(|(_, r)| !r.passed(DEFAULT_TOL)).map(|(n, _)| n).collect();
    let worst = suite.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let coords: usize = suite.iter().map(|(_, r)| r.checked).sum();
    l.line(
        "gradient correctness",
        bad.is_empty() && suite.len() >= 50 && secs < 120.0,
        format!("{} configurations, {coords} coordinates, worst rel err {worst:.2e}, {secs:.1}s, failing {bad:?}", suite.len()),
    );
}

fn anchors(l: &mut Ledger) {
    let m = ModelConfig::toy(256, 16, 32, 64, 2);
    let n = generate_anchors(&AnchorConfig::default(), &m.decoder.level_sizes(), 256).unwrap().len();
    let err = common::delta_roundtrip(10_000, 99);
    l.line("anchor algebra", n == 12_285 && err < 1e-5, format!("{n} anchors at 256², delta round trip max err {err:.2e} over 10⁴ boxes"));
}

fn focal(l: &mut Ledger) {
    // −α·0·ln 1 is −0.0; compare and print it as zero.
    let one = focal_term(1.0, 0.5, 2.0) + 0.0;
    let half = focal_term(0.5, 0.5, 2.0);
    // Through the batched loss: one positive anchor with logit 0.
    let batched = focal_loss(&[0.0f64], &[1], 1, FocalParams::default()).value;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let p: f64 = rng.random_range(1e-6..1.0);
        let ce = -p.ln();
        worst = worst.max((focal_term(p, 0.5, 0.0) - 0.5 * ce).abs() / (0.5 * ce).max(f64::MIN_POSITIVE));
    }
    let ok = one == 0.0 && (half - 0.086643).abs() <= 1e-6 && (batched - 0.086643).abs() <= 1e-6 && worst <= 1e-6;
    l.line("focal point checks", ok, format!("p_t=1 → {one}, p_t=0.5 → {half:.7} (batched {batched:.7}), γ=0 vs ½CE rel err {worst:.1e}"));
}

fn oracles(l: &mut Ledger) {
    let nms = common::nms_oracle(1000, 31);
    let pq = common::pq_oracle(1000, 32);
    let ap = common::ap_oracle(1000, 33);
    let hu = common::hungarian_oracle(1000, 34);
    let dice = common::dice_relation(1000, 35);
    l.line(
        "oracle equivalence",
        nms + pq + ap + hu == 0 && dice < 1e-9,
        format!("mismatches: NMS {nms}/1000, PQ {pq}/1000, AP {ap}/1000, Hungarian {hu}/1000; dice relation err {dice:.1e}"),
    );
}

/// Independent replay of the plateau rule over an lr trace: a reduction
/// happens exactly when `patience` epochs in a row failed to improve.
fn plateau_violations(monitor: &[f64], lrs: &[f64], patience: usize, floor: f64) -> Vec<String> {
    let mut v = Vec::new();
    let mut best = f64::INFINITY;
    let mut since = 0;
    for e in 0..monitor.len() {
        if lrs[e] < floor {
            v.push(format!("epoch {} below floor", e + 1));
        }
        if monitor[e] < best {
            best = monitor[e];
            since = 0;
        } else {
            since += 1;
        }
        if e + 1 < lrs.len() {
            let reduced = lrs[e + 1] < lrs[e];
            if lrs[e + 1] > lrs[e] {
                v.push(format!("epoch {} increased", e + 2));
            }
            if reduced && since < patience {
                v.push(format!("epoch {} reduced after {since} bad epochs", e + 2));
            }
            if since >= patience {
                if !reduced && lrs[e] > floor {
                    v.push(format!("epoch {} should have reduced", e + 2));
                }
                since = 0;
            }
        }
    }
    v
}

fn scheduler(l: &mut Ledger, desk: Option<&TrainReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut problems = Vec::new();
    let mut reductions = 0;
    for _ in 0..500 {
        let mut s = ReduceOnPlateau::new(3e-4, 0.1, 5, 3e-7);
        let mut lrs = vec![s.lr];
        let mut mon = Vec::new();
        let mut level = 1.0;
        for _ in 0..80 {
            // Mostly flat with occasional improvements.
            if rng.random_bool(0.15) {
                level *= 0.9;
            }
            let m = level + rng.random_range(0.0..0.05);
            mon.push(m);
            lrs.push(s.observe(m));
        }
        lrs.pop();
        reductions += lrs.windows(2).filter(|w| w[1] < w[0]).count();
        problems.extend(plateau_violations(&mon, &lrs, 5, 3e-7));
    }
    let mut detail = format!("500 synthetic traces, {reductions} reductions, {} violations", problems.len());
    if let Some(r) = desk {
        let mon: Vec<f64> = r.records.iter().map(|x| x.val_loss.unwrap_or(x.train_loss)).collect();
        let lrs: Vec<f64> = r.records.iter().map(|x| x.lr).collect();
        let p = plateau_violations(&mon, &lrs, 5, 3e-7);
        detail += &format!("; desk run lr {:.1e} → {:.1e}, {} violations", lrs[0], lrs[lrs.len() - 1], p.len());
        problems.extend(p);
    }
    if let Some(first) = problems.first() {
        detail += &format!(" (first: {first})");
    }
    l.line("scheduler contract", problems.is_empty() && reductions > 0, detail);
}

fn self_consistency(l: &mut Ledger, data: &Path) {
    let ds = load_dataset(data).unwrap();
    let gts: Vec<_> = ds.samples.iter().map(|s| s.gt.clone()).collect();
    let preds: Vec<ImagePrediction> = gts.iter().map(oracle_prediction).collect();
    let r = evaluate(&preds, &gts, 2, &ds.manifest.class_names, EvalMode::Full, &EvalSettings::default()).unwrap();
    let f1 = r.detection.as_ref().map(|d| d.f1);
    let ok = r.ap == Some(1.0) && r.bpq == Some(1.0) && r.dice == Some(1.0) && f1 == Some(1.0);
    l.line(
        "self-consistency oracle",
        ok,
        format!("{} images: AP {:?}, bPQ {:?}, dice {:?}, F1 {f1:?}, mPQ {:?}", gts.len(), r.ap, r.bpq, r.dice, r.mpq),
    );
}

fn desk_run(l: &mut Ledger) -> Option<(TrainReport, PathBuf)> {
    let root = scratch("desk");
    let t = Instant::now();
    synth_generate(&SynthConfig::new(1, 500, 128, 2), &root.join("train")).unwrap();
    synth_generate(&SynthConfig::new(2, 100, 128, 2), &root.join("test")).unwrap();
    let cfg = RunConfig {
        data: root.join("train"),
        test_data: Some(root.join("test")),
        out: root.join("run"),
        model: desk_model(),
        epochs: 50,
        ..Default::default()
    };
    let report = match train(&cfg) {
        Ok(r) => r,
        Err(e) => {
            l.line("desk-scale end-to-end", false, format!("training aborted: {e}"));
            l.line("freeze contract", false, "no desk run".into());
            return None;
        }
    };
    let secs = t.elapsed().as_secs_f64();
    let first = report.records[0].train_loss;
    let last = report.records.last().unwrap().train_loss;
    let t = report.test_report.as_ref().unwrap();
    let ap = t.ap.unwrap_or(0.0);
    let f1 = t.detection.as_ref().map_or(0.0, |d| d.f1);
    let bpq = t.bpq.unwrap_or(0.0);
    let ok = last <= 0.5 * first && ap >= 0.6 && f1 >= 0.7 && bpq >= 0.4 && secs <= 1800.0;
    l.line(
        "desk-scale end-to-end",
        ok,
        format!(
            "loss {first:.4} → {last:.4} (ratio {:.3}), AP@0.5 {ap:.4}, F1 {f1:.4}, bPQ {bpq:.4}, dice {:.4}, mPQ {:.4}, {:.1} min on {} thread(s)",
            last / first,
            t.dice.unwrap_or(0.0),
            t.mpq.unwrap_or(0.0),
            secs / 60.0,
            rayon::current_num_threads()
        ),
    );
    Some((report, root.join("test")))
}

fn freeze(l: &mut Ledger, desk: Option<&TrainReport>) {
    // Imported archives: a short run on exported toy features.
    let root = scratch("freeze");
    synth_generate(&SynthConfig::new(3, 16, 128, 2), &root.join("train")).unwrap();
    let model = desk_model();
    let enc = ToyEncoder::new(model.encoder.clone(), 11).unwrap();
    let ds = load_dataset(&root.join("train")).unwrap();
    for s in &ds.samples {
        save_embeddings(&enc.forward(&s.image).unwrap(), &root.join("emb").join(&s.name)).unwrap();
    }
    let before = snapshot(&root.join("emb"));
    let cfg = RunConfig {
        data: root.join("train"),
        out: root.join("run"),
        encoder: EncoderSource::Embeddings { dir: root.join("emb") },
        model,
        epochs: 2,
        augment: AugmentConfig::none(),
        ..Default::default()
    };
    let imported = train(&cfg).map(|r| r.encoder_unchanged).unwrap_or(false) && snapshot(&root.join("emb")) == before;
    // Nothing frozen may appear among the checkpointed tensors either.
    let toy = desk.is_some_and(|r| r.encoder_unchanged);
    let clean = desk.is_some_and(|r| {
        read_checkpoint_manifest(&r.best_checkpoint())
            .map(|m| m.tensors.iter().all(|t| !t.name.starts_with("encoder")))
            .unwrap_or(false)
    });
    l.line(
        "freeze contract",
        toy && imported && clean,
        format!("toy encoder after desk run unchanged: {toy}; imported archives unchanged: {imported}; checkpoint holds no encoder tensors: {clean}"),
    );
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(l: &mut Ledger) {
    // Same configuration and seed twice, augmentation on, reduced size.
    let root = scratch("determinism");
    synth_generate(&SynthConfig::new(4, 48, 128, 2), &root.join("train")).unwrap();
    synth_generate(&SynthConfig::new(5, 12, 128, 2), &root.join("test")).unwrap();
    let run = |name: &str| {
        let cfg = RunConfig {
            data: root.join("train"),
            test_data: Some(root.join("test")),
            out: root.join(name),
            model: desk_model(),
            epochs: 3,
            overlays: 0,
            ..Default::default()
        };
        train(&cfg).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let mut diffs = Vec::new();
    for sub in ["checkpoints/best", "checkpoints/last", "test"] {
        let (x, y) = (snapshot(&a.run_dir.join(sub)), snapshot(&b.run_dir.join(sub)));
        if x.len() != y.len() {
            diffs.push(format!("{sub}: file count"));
        }
        for ((px, bx), (_, by)) in x.iter().zip(&y) {
            let name = px.file_name().unwrap().to_string_lossy().to_string();
            // The manifest embeds the run's own output path.
            let same = if name == "manifest.json" {
                let norm = |b: &[u8]| {
                    let mut v: serde_json::Value = serde_json::from_slice(b).unwrap();
                    v["config"]["out"] = serde_json::Value::Null;
                    v
                };
                norm(bx) == norm(by)
            } else {
                bx == by
            };
            if !same {
                diffs.push(format!("{sub}/{name}"));
            }
        }
    }
    let losses = |r: &TrainReport| r.records.iter().map(|e: &EpochRecord| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    if losses(&a) != losses(&b) {
        diffs.push("loss curves".into());
    }
    l.line(
        "determinism",
        diffs.is_empty(),
        format!("two 3-epoch runs (48 images, augmentation on): checkpoints, reports and curves identical; differences {diffs:?}"),
    );
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut l = Ledger { failed: Vec::new() };
    gradients(&mut l);
    anchors(&mut l);
    focal(&mut l);
    oracles(&mut l);
    let desk = desk_run(&mut l);
    freeze(&mut l, desk.as_ref().map(|d| &d.0));
    scheduler(&mut l, desk.as_ref().map(|d| &d.0));
    determinism(&mut l);
    match &desk {
        Some((_, test)) => self_consistency(&mut l, test),
        None => {
            let root = scratch("truth");
            synth_generate(&SynthConfig::new(2, 100, 128, 2), &root).unwrap();
            self_consistency(&mut l, &root);
        }
    }
    let (ours, paper) = full_config_parameter_report(5).unwrap();
    println!(
        "INFO trainable parameters, full configuration: {ours} (paper reports {:.2}M); desk model: {}",
        paper as f64 / 1e6,
        desk.as_ref().map_or(0, |d| d.0.trainable_parameters)
    );
    if l.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {:?}", l.failed);
        std::process::exit(1);
    }
}
