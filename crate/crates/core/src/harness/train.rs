//! Training loop: frozen features, trainable decoder + head, Adam with
//! reduce-on-plateau, best/last checkpoints and a per-epoch curve file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::model::{Detector, Features};
use super::pipeline::{write_overlays, Pipeline};
use super::scheduler::ReduceOnPlateau;
use crate::data::{augment, load_dataset, sample_seed, Sample};
use crate::detect::{detection_loss, match_anchors, BoxTargets, FocalParams, LossBreakdown};
use crate::error::{Error, Result};
use crate::metrics::{EvalMode, MetricsReport};
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_focal: f64,
    pub train_box: f64,
    pub val_loss: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_monitor: f64,
    pub steps: u64,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    /// Encoder weights (or embedding files) hash the same before and after.
    pub encoder_unchanged: bool,
    pub train_images: usize,
    pub val_images: usize,
    pub test_report: Option<MetricsReport>,
}

impl TrainReport {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("best")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("last")
    }
}

const CURVES_HEADER: &str = "epoch,train_loss,train_focal,train_box,val_loss,lr,seconds";

/// Splits `n` sample indices into (train, validation) with a seeded shuffle.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76a1_1d47);
    idx.shuffle(&mut rng);
    let mut n_val = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 4 {
        n_val = n_val.max(1);
    }
    n_val = n_val.min(n.saturating_sub(2));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    let mut val_sorted = val;
    val_sorted.sort_unstable();
    train.sort_unstable();
    (train, val_sorted)
}

/// Batches of at most `size`; a trailing singleton joins the previous batch
/// so batch norm always sees two samples.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Per-sample features `[D, S, S]` per layer and matched anchor targets.
struct Prepared {
    layers: Vec<Tensor>,
    targets: BoxTargets,
}

struct Trainer<'a> {
    config: &'a RunConfig,
    features: Features,
    detector: Detector,
    samples: Vec<Sample>,
    /// Filled when inputs do not change between epochs.
    cache: Vec<Option<Prepared>>,
    augmenting: bool,
}

impl Trainer<'_> {
    fn prepare(&self, batch: &[usize], epoch: usize) -> Result<(Vec<Tensor>, Vec<BoxTargets>)> {
        let augmented: Vec<Sample>;
        let samples: Vec<&Sample> = if self.augmenting && epoch > 0 {
            let global = self.config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            augmented = batch
                .iter()
                .map(|&i| augment(&self.samples[i], &self.config.augment, sample_seed(global, i)))
                .collect::<Result<_>>()?;
            augmented.iter().collect()
        } else {
            batch.iter().map(|&i| &self.samples[i]).collect()
        };
        let items: Vec<(&str, &Tensor)> = samples.iter().map(|s| (s.name.as_str(), &s.image)).collect();
        let layers = self.features.batch(&items)?;
        let targets = samples
            .iter()
            .map(|s| match_anchors(&self.detector.anchors.boxes, &s.gt_boxes()))
            .collect::<Result<_>>()?;
        Ok((layers, targets))
    }

    /// Batch inputs, from the cache when possible. Epoch 0 marks the
    /// unaugmented view used for validation.
    fn inputs(&mut self, batch: &[usize], epoch: usize) -> Result<(Vec<Tensor>, Vec<BoxTargets>)> {
        if self.augmenting && epoch > 0 {
            return self.prepare(batch, epoch);
        }
        let missing: Vec<usize> = batch.iter().copied().filter(|&i| self.cache[i].is_none()).collect();
        if !missing.is_empty() {
            let (layers, targets) = self.prepare(&missing, 0)?;
            for (j, (&i, t)) in missing.iter().zip(targets).enumerate() {
                self.cache[i] = Some(Prepared {
                    layers: layers.iter().map(|l| l.index0(j)).collect(),
                    targets: t,
                });
            }
        }
        let prepared: Vec<&Prepared> = batch.iter().map(|&i| self.cache[i].as_ref().unwrap()).collect();
        let layer_count = prepared[0].layers.len();
        let layers = (0..layer_count)
            .map(|l| Tensor::stack(&prepared.iter().map(|p| p.layers[l].clone()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok((layers, prepared.iter().map(|p| p.targets.clone()).collect()))
    }

    fn loss(&self, tape: &mut Tape, layers: Vec<Tensor>, targets: &[BoxTargets]) -> Result<(Var, LossBreakdown)> {
        let vars: Vec<Var> = layers.into_iter().map(|t| tape.input(t)).collect();
        let head = self.detector.forward(tape, &vars)?;
        let focal = FocalParams {
            alpha: self.config.focal_alpha,
            gamma: self.config.focal_gamma,
        };
        detection_loss(tape, head, targets, focal)
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes to a sibling temp directory first so an interrupted save never
/// clobbers the previous checkpoint.
fn save_atomic(dir: &Path, det: &Detector, config: &RunConfig, epoch: usize, step: u64) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    save_checkpoint(&tmp, det, config, epoch, step)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn train(config: &RunConfig) -> Result<TrainReport> {
    config.validate()?;
    let ds = load_dataset(&config.data)?;
    if ds.manifest.num_classes != config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset {} has {} classes, model is configured for {}",
            config.data.display(),
            ds.manifest.num_classes,
            config.model.num_classes
        )));
    }
    let s = config.model.image_size();
    if let Some(bad) = ds.samples.iter().find(|x| x.size() != (s, s)) {
        return Err(Error::Invalid(format!(
            "{}: image is {:?}, model takes {s}x{s}",
            bad.name,
            bad.size()
        )));
    }
    if ds.samples.len() < 2 {
        return Err(Error::Invalid("need at least two training images".into()));
    }

    let out = &config.out;
    let ckpt_dir = out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    config.save(&out.join("config.json"))?;

    let features = Features::new(&config.encoder, &config.model.encoder)?;
    let fingerprint = features.fingerprint()?;
    let augmenting = !features.is_precomputed() && !config.augment.is_identity();
    if features.is_precomputed() && !config.augment.is_identity() {
        log::warn!("augmentation is disabled: features come from precomputed embeddings");
    }
    let detector = Detector::new(config.model.clone(), config.seed)?;
    let (train_idx, val_idx) = validation_split(ds.samples.len(), config.validation_fraction, config.seed);
    log::info!(
        "{} train / {} validation images, {} trainable parameters",
        train_idx.len(),
        val_idx.len(),
        detector.trainable_parameters()
    );
    let n = ds.samples.len();
    let mut t = Trainer {
        config,
        features,
        detector,
        samples: ds.samples,
        cache: (0..n).map(|_| None).collect(),
        augmenting,
    };

    let curves_path = out.join("curves.csv");
    let mut curves = fs::File::create(&curves_path).map_err(|e| Error::io(&curves_path, e))?;
    writeln!(curves, "{CURVES_HEADER}").map_err(|e| Error::io(&curves_path, e))?;

    let mut adam: Adam = Adam::default();
    let mut sched = ReduceOnPlateau::new(config.lr, config.plateau_factor, config.plateau_patience, config.lr_floor);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_0dd3);
    let mut records = Vec::with_capacity(config.epochs);
    let (mut best_epoch, mut best_monitor) = (0, f64::INFINITY);
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let lr = sched.lr;
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut sum_f, mut sum_b, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in batches(&order, config.batch_size) {
            let (layers, targets) = t.inputs(&batch, epoch)?;
            let mut tape = Tape::new(true);
            let (root, parts) = t.loss(&mut tape, layers, &targets)?;
            if !parts.total().is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {} at epoch {epoch}, step {step}; last good checkpoint is {}",
                    parts.total(),
                    ckpt_dir.join("last").display()
                )));
            }
            let grads = tape.backward(root)?;
            t.detector.store.zero_grad();
            t.detector.store.accumulate(&grads);
            adam.step(&mut t.detector.store, lr).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, step {step}")),
                other => other,
            })?;
            t.detector.store.commit(tape.bn_updates());
            step += 1;
            let w = batch.len() as f64;
            sum += parts.total() * w;
            sum_f += parts.focal * w;
            sum_b += parts.boxes * w;
            seen += batch.len();
        }
        let seen = seen as f64;
        let (train_loss, train_focal, train_box) = (sum / seen, sum_f / seen, sum_b / seen);

        let val_loss = if val_idx.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for batch in batches(&val_idx, config.batch_size) {
                let (layers, targets) = t.inputs(&batch, 0)?;
                let mut tape = Tape::new(false);
                let (_, parts) = t.loss(&mut tape, layers, &targets)?;
                total += parts.total() * batch.len() as f64;
            }
            Some(total / val_idx.len() as f64)
        };
        let monitor = val_loss.unwrap_or(train_loss);
        if !monitor.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {monitor} at epoch {epoch}, step {step}")));
        }
        sched.observe(monitor);
        if monitor < best_monitor {
            best_monitor = monitor;
            best_epoch = epoch;
            save_atomic(&ckpt_dir.join("best"), &t.detector, config, epoch, step)?;
        }
        save_atomic(&ckpt_dir.join("last"), &t.detector, config, epoch, step)?;

        let rec = EpochRecord {
            epoch,
            train_loss,
            train_focal,
            train_box,
            val_loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(
            curves,
            "{},{},{},{},{},{},{:.3}",
            rec.epoch,
            rec.train_loss,
            rec.train_focal,
            rec.train_box,
            rec.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            rec.lr,
            rec.seconds
        )
        .map_err(|e| Error::io(&curves_path, e))?;
        log::info!(
            "epoch {epoch}: train {train_loss:.4} (focal {train_focal:.4}, box {train_box:.4}) val {} lr {lr:.2e} {:.1}s",
            val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            rec.seconds
        );
        records.push(rec);
    }

    let encoder_unchanged = t.features.fingerprint()? == fingerprint;
    if !encoder_unchanged {
        return Err(Error::Invalid("frozen encoder changed during training".into()));
    }

    let test_report = match &config.test_data {
        Some(dir) => Some(evaluate_best(config, &ckpt_dir.join("best"), dir, &out.join("test"))?),
        None => None,
    };

    Ok(TrainReport {
        run_dir: out.clone(),
        records,
        best_epoch,
        best_monitor,
        steps: step,
        trainable_parameters: t.detector.store.trainable_count(),
        total_parameters: t.detector.store.total_count(),
        encoder_unchanged,
        train_images: train_idx.len(),
        val_images: val_idx.len(),
        test_report,
    })
}

fn evaluate_best(config: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<MetricsReport> {
    let (det, _) = load_checkpoint(ckpt)?;
    let pipeline = Pipeline::new(det, config.clone())?;
    let ds = load_dataset(data)?;
    if ds.manifest.num_classes != config.model.num_classes {
        return Err(Error::Config(format!(
            "test set has {} classes, model has {}",
            ds.manifest.num_classes, config.model.num_classes
        )));
    }
    let (report, preds) = pipeline.evaluate_samples(&ds.samples, ds.manifest.num_classes, &ds.manifest.class_names, EvalMode::Full)?;
    report.write(out)?;
    write_overlays(&out.join("overlays"), &ds.samples, &preds, &pipeline, config.overlays)?;
    log::info!("test: {}", report.summary());
    Ok(report)
}

/// Parses `curves.csv` back into records.
pub fn read_curves(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Format {
        path: path.to_path_buf(),
        offset: line as u64,
        detail: "malformed curves row".into(),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(i));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(i))?,
                train_loss: num(f[1])?,
                train_focal: num(f[2])?,
                train_box: num(f[3])?,
                val_loss: if f[4].is_empty() { None } else { Some(num(f[4])?) },
                lr: num(f[5])?,
                seconds: num(f[6])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_batches() {
        let (tr, va) = validation_split(500, 0.1, 3);
        assert_eq!((tr.len(), va.len()), (450, 50));
        assert!(va.iter().all(|v| !tr.contains(v)));
        assert_eq!(validation_split(500, 0.1, 3), (tr, va));
        let b = batches(&(0..17).collect::<Vec<_>>(), 8);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 9]);
        assert_eq!(batches(&[0, 1, 2], 8).len(), 1);
    }
}
