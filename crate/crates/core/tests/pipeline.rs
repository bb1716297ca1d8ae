mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use autoprompt::encoder::{save_embeddings, ToyEncoder};
use autoprompt::harness::checkpoint::CHECKPOINT_MANIFEST;
use autoprompt::harness::import::import_embeddings;
use autoprompt::harness::{load_checkpoint, read_checkpoint_manifest, read_curves, train, EncoderSource, Pipeline};
use autoprompt::data::{load_dataset, write_png, AugmentConfig};
use autoprompt::metrics::EvalMode;
use autoprompt::postprocess::{MaskStack, PromptFile};
use autoprompt::{Error, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_autoprompt");

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

#[test]
fn train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_datasets(dir.path(), 24, 6);
    let cfg = common::tiny_config(dir.path(), "run", 3);
    let report = train(&cfg).unwrap();
    assert!(report.encoder_unchanged);
    assert_eq!(report.records.len(), 3);
    assert!(report.records.windows(2).all(|w| w[1].lr <= w[0].lr));

    // Run directory contents.
    let run = dir.path().join("run");
    for f in ["config.json", "curves.csv", "test/report.json", "test/confusion.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    // Seconds are written at millisecond precision; losses round-trip exactly.
    let curves = read_curves(&run.join("curves.csv")).unwrap();
    for (a, b) in curves.iter().zip(&report.records) {
        assert_eq!((a.epoch, a.train_loss, a.val_loss, a.lr), (b.epoch, b.train_loss, b.val_loss, b.lr));
    }
    assert!(fs::read_dir(run.join("test/overlays")).unwrap().count() == 2);

    // Trainable tensors are exactly decoder + head, and their count is reported.
    let m = read_checkpoint_manifest(&report.best_checkpoint()).unwrap();
    let trainable: usize = m.tensors.iter().filter(|t| t.trainable).map(|t| t.shape.iter().product::<usize>()).sum();
    assert_eq!(trainable, m.trainable_parameters);
    assert!(m.tensors.iter().all(|t| t.name.starts_with("decoder.") || t.name.starts_with("head.")));
    assert!(m.tensors.iter().filter(|t| t.kind == "param").all(|t| t.trainable));

    // Reloaded checkpoint reproduces the test report bit for bit.
    let p = Pipeline::from_checkpoint(&report.best_checkpoint()).unwrap();
    let ds = load_dataset(&dir.path().join("test")).unwrap();
    let (again, _) = p.evaluate_samples(&ds.samples, 2, &ds.manifest.class_names, EvalMode::Full).unwrap();
    let first = report.test_report.unwrap();
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&first).unwrap());
}

#[test]
fn checkpoint_mismatch_names_tensors() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_datasets(dir.path(), 8, 2);
    let mut cfg = common::tiny_config(dir.path(), "run", 1);
    cfg.test_data = None;
    let r = train(&cfg).unwrap();
    let ck = r.last_checkpoint();
    let path = ck.join(CHECKPOINT_MANIFEST);
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["config"]["model"]["decoder"]["channels"] = 6.into();
    fs::write(&path, m.to_string()).unwrap();
    let err = load_checkpoint(&ck).unwrap_err().to_string();
    assert!(err.contains("head.cls.out.weight"), "{err}");
    assert!(err.contains("decoder.p1"), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_datasets(dir.path(), 8, 2);
    let mut cfg = common::tiny_config(dir.path(), "run", 3);
    cfg.test_data = None;
    cfg.lr = 1e38;
    cfg.lr_floor = 1e38;
    match train(&cfg) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch") && msg.contains("step"), "{msg}"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn cli_end_to_end_with_stub_and_bridge() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (code, text) = cli(&["synth", "--seed", "5", "--n", "12", "--size", "64", "--classes", "2", "--out", &s(&root.join("train"))]);
    assert_eq!(code, 0, "{text}");
    let (code, _) = cli(&["synth", "--seed", "6", "--n", "3", "--size", "64", "--classes", "2", "--out", &s(&root.join("test"))]);
    assert_eq!(code, 0);

    let mut cfg = common::tiny_config(root, "run", 1);
    cfg.test_data = None;
    cfg.epochs = 99;
    cfg.save(&root.join("c.json")).unwrap();
    // Flags override config keys.
    let (code, text) = cli(&["train", "--config", &s(&root.join("c.json")), "--epochs", "1", "--set", "post.prompt_threshold=0.3"]);
    assert_eq!(code, 0, "{text}");
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["epochs"], 1);
    assert_eq!(echoed["post"]["prompt_threshold"], 0.3);

    let ckpt = s(&root.join("run/checkpoints/best"));
    let (code, text) = cli(&["evaluate", "--ckpt", &ckpt, "--data", &s(&root.join("test")), "--mode", "pq", "--out", &s(&root.join("eval"))]);
    assert_eq!(code, 0, "{text}");
    assert!(root.join("eval/report.json").exists());

    let image = s(&root.join("test/images/synth_00000.png"));
    assert!(Path::new(&image).exists(), "synthetic naming changed");
    let (code, text) = cli(&["detect", "--ckpt", &ckpt, "--image", &image, "--emit-masks", "--prompt-threshold", "0.0", "--out", &s(&root.join("stub"))]);
    assert_eq!(code, 0, "{text}");
    let bridge = format!("python3 {}", s(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_bridge.py")));
    let (code, text) = cli(&[
        "detect", "--ckpt", &ckpt, "--image", &image, "--emit-masks", "--prompt-threshold", "0.0",
        "--use-bridge", &bridge, "--out", &s(&root.join("bridge")),
    ]);
    assert_eq!(code, 0, "{text}");
    // Same artifacts either way; the bridge masks feed the merge unchanged.
    for f in ["synth_00000.prompts.json", "synth_00000.instances.tsr", "synth_00000.overlay.png"] {
        assert!(root.join("stub").join(f).exists() && root.join("bridge").join(f).exists(), "{f}");
    }
    let prompts = PromptFile::read(&root.join("bridge/synth_00000.prompts.json")).unwrap();
    assert_eq!(prompts, PromptFile::read(&root.join("stub/synth_00000.prompts.json")).unwrap());
    let masks = MaskStack::read(&root.join("bridge/synth_00000.masks.tsr")).unwrap();
    assert_eq!(masks.len(), prompts.boxes.len());
    for (m, b) in masks.masks.iter().zip(&prompts.boxes) {
        if m.iter().any(|&v| v) {
            let hit = (0..64 * 64).any(|p| m[p] && {
                let (r, c) = ((p / 64) as f32 + 0.5, (p % 64) as f32 + 0.5);
                b.x1 <= c && c < b.x2 && b.y1 <= r && r < b.y2
            });
            assert!(hit, "mask outside its box");
        }
    }

    // Validation errors exit 2, runtime failures 3.
    let (code, _) = cli(&["train", "--config", &s(&root.join("c.json")), "--set", "lr_floor=1.0"]);
    assert_eq!(code, 2);
    let (code, _) = cli(&["train", "--config", &s(&root.join("c.json")), "--set", "no_such_key=1"]);
    assert_eq!(code, 2);
    write_png(&root.join("big.png"), &Tensor::zeros(&[3, 80, 80])).unwrap();
    let (code, text) = cli(&["detect", "--ckpt", &ckpt, "--image", &s(&root.join("big.png"))]);
    assert_eq!(code, 2, "{text}");
    let (code, _) = cli(&["detect", "--ckpt", &ckpt, "--image", &image, "--emit-masks", "--use-bridge", "false", "--out", &s(&root.join("x"))]);
    assert_eq!(code, 3);
    let (code, _) = cli(&["evaluate", "--ckpt", &s(&root.join("nope")), "--data", &s(&root.join("test"))]);
    assert_eq!(code, 3);
}

#[test]
fn training_on_imported_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_datasets(dir.path(), 8, 2);
    let mut cfg = common::tiny_config(dir.path(), "run", 1);
    cfg.test_data = None;
    // Export toy features as archives, one per sample.
    let enc = ToyEncoder::new(cfg.model.encoder.clone(), 3).unwrap();
    let ds = load_dataset(&cfg.data).unwrap();
    let emb = dir.path().join("emb");
    for s in &ds.samples {
        save_embeddings(&enc.forward(&s.image).unwrap(), &emb.join(&s.name)).unwrap();
    }
    let summary = import_embeddings(&emb, Some(&cfg.data)).unwrap();
    assert_eq!(summary.archives.len(), 8);
    assert!(summary.missing.is_empty());
    assert_eq!(summary.blocks, [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]]);

    cfg.encoder = EncoderSource::Embeddings { dir: emb.clone() };
    cfg.augment = AugmentConfig::none();
    let r = train(&cfg).unwrap();
    assert!(r.encoder_unchanged);
    assert!(r.records[0].train_loss.is_finite());
}
