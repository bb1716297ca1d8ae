use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use autoprompt::data::{synth_generate, SynthConfig};
use autoprompt::harness::import::import_embeddings;
use autoprompt::harness::{detect_image, evaluate_checkpoint, read_checkpoint_manifest, train, EncoderSource, RunConfig};
use autoprompt::metrics::EvalMode;
use autoprompt::postprocess::{Bridge, MaskMode};
use autoprompt::{Error, Result};

#[derive(Parser)]
#[command(name = "autoprompt", version, about = "Box-prompt nucleus detection over frozen encoder features")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train decoder + head; writes config.json, curves.csv, checkpoints/ and test/ under `out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train on precomputed embedding archives instead of the toy encoder.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Any config key as `dotted.path=json`, e.g. `post.nms_iou=0.4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint; writes report.json, confusion.csv and overlays/.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: EvalMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect nuclei in one image and emit box prompts (and masks).
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        emit_masks: bool,
        /// External mask decoder, called as `<cmd> decode-masks --prompts --image --out`.
        #[arg(long)]
        use_bridge: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        score_threshold: Option<f32>,
        #[arg(long)]
        prompt_threshold: Option<f32>,
        #[arg(long)]
        nms_iou: Option<f64>,
        #[arg(long, value_enum)]
        mask_mode: Option<MaskMode>,
    },
    /// Generate a synthetic blob dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value = "data/synth")]
        out: PathBuf,
    },
    /// Validate embedding archives and optionally write a matching config.
    ImportEmbeddings {
        #[arg(long)]
        dir: PathBuf,
        /// Check that every sample of this dataset has an archive.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write a training config that reads these archives.
        #[arg(long)]
        write_config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
    },
}

/// Sets `path` (dot-separated) in a JSON object to `raw`, parsed as JSON
/// when possible and as a string otherwise.
fn set_key(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*k) {
                return Err(Error::Config(format!("unknown config key `{path}`")));
            }
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*k)
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    }
    Ok(())
}

fn config_from(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut v = serde_json::to_value(&base).map_err(|e| Error::Config(e.to_string()))?;
    for (k, raw) in overrides {
        set_key(&mut v, k, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train {
            config,
            data,
            test_data,
            out,
            epochs,
            lr,
            batch_size,
            seed,
            embeddings,
            overrides,
        } => {
            let mut kv: Vec<(String, String)> = Vec::new();
            let mut flag = |k: &str, v: Value| kv.push((k.to_string(), v.to_string()));
            if let Some(v) = data {
                flag("data", Value::from(v.to_string_lossy().into_owned()));
            }
            if let Some(v) = test_data {
                flag("test_data", Value::from(v.to_string_lossy().into_owned()));
            }
            if let Some(v) = out {
                flag("out", Value::from(v.to_string_lossy().into_owned()));
            }
            if let Some(v) = epochs {
                flag("epochs", Value::from(v));
            }
            if let Some(v) = lr {
                flag("lr", Value::from(v));
            }
            if let Some(v) = batch_size {
                flag("batch_size", Value::from(v));
            }
            if let Some(v) = seed {
                flag("seed", Value::from(v));
            }
            if let Some(v) = embeddings {
                let src = EncoderSource::Embeddings { dir: v };
                flag("encoder", serde_json::to_value(src).map_err(|e| Error::Config(e.to_string()))?);
            }
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
                kv.push((k.to_string(), v.to_string()));
            }
            let cfg = config_from(config.as_deref(), &kv)?;
            let report = train(&cfg)?;
            let last = report.records.last().unwrap();
            println!(
                "trained {} epochs ({} steps): train loss {:.4} → {:.4}, best epoch {} ({:.4})",
                report.records.len(),
                report.steps,
                report.records[0].train_loss,
                last.train_loss,
                report.best_epoch,
                report.best_monitor
            );
            println!("trainable parameters: {}", report.trainable_parameters);
            if let Some(r) = &report.test_report {
                println!("{}", r.summary());
            }
            println!("run directory: {}", report.run_dir.display());
        }
        Cmd::Evaluate { ckpt, data, mode, out } => {
            let out = out.unwrap_or_else(|| ckpt.join("eval"));
            let report = evaluate_checkpoint(&ckpt, &data, mode, &out)?;
            println!("{}", report.summary());
            println!("report: {}", out.join("report.json").display());
        }
        Cmd::Detect {
            ckpt,
            image,
            emit_masks,
            use_bridge,
            out,
            score_threshold,
            prompt_threshold,
            nms_iou,
            mask_mode,
        } => {
            let mut post = read_checkpoint_manifest(&ckpt)?.config.post;
            if let Some(v) = score_threshold {
                post.score_threshold = v;
            }
            if let Some(v) = prompt_threshold {
                post.prompt_threshold = v;
            }
            if let Some(v) = nms_iou {
                post.nms_iou = v;
            }
            if let Some(v) = mask_mode {
                post.mask_mode = v;
            }
            let bridge = use_bridge.as_deref().map(Bridge::parse).transpose()?;
            let res = detect_image(&ckpt, &image, emit_masks, bridge.as_ref(), &out, Some(post))?;
            println!("{} detections above threshold {}", res.detections_above_threshold, post.prompt_threshold);
            if let Some(seg) = &res.segmentation {
                println!("{} instances in the merged map", seg.num_instances());
            }
        }
        Cmd::Synth {
            seed,
            n,
            size,
            classes,
            out,
        } => {
            let cfg = SynthConfig::new(seed, n, size, classes);
            let s = synth_generate(&cfg, &out)?;
            println!(
                "wrote {} images with {} blobs ({} placements skipped) to {}; per class {:?}",
                s.images,
                s.blobs,
                s.skipped,
                out.display(),
                s.class_counts
            );
        }
        Cmd::ImportEmbeddings {
            dir,
            data,
            write_config,
            channels,
        } => {
            let s = import_embeddings(&dir, data.as_deref())?;
            println!(
                "{} archives: {} layers of {}x{}x{} (image {}, patch {}), blocks {:?}",
                s.archives.len(),
                s.config.layer_count,
                s.config.embed_dim,
                s.config.grid_size(),
                s.config.grid_size(),
                s.config.image_size,
                s.config.patch_size,
                s.blocks
            );
            if !s.missing.is_empty() {
                return Err(Error::Invalid(format!(
                    "{} samples have no archive, e.g. {}",
                    s.missing.len(),
                    s.missing[0]
                )));
            }
            if let Some(path) = write_config {
                let mut cfg = RunConfig {
                    encoder: EncoderSource::Embeddings { dir: dir.clone() },
                    ..Default::default()
                };
                if let Some(d) = data {
                    cfg.data = d;
                }
                cfg.model.encoder = s.config.clone();
                cfg.model.decoder.input_channels = s.config.embed_dim;
                cfg.model.decoder.base_size = s.config.grid_size();
                cfg.model.decoder.channels = channels;
                cfg.augment = autoprompt::data::AugmentConfig::none();
                cfg.validate()?;
                cfg.save(&path)?;
                println!("config: {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
