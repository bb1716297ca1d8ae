//! Inference: features → pyramid → head → detections → prompts → masks.

use std::fs;
use std::path::Path;

use image::Rgb;

use super::checkpoint::load_checkpoint;
use super::config::{PostConfig, RunConfig};
use super::model::{Detector, Features};
use crate::data::{load_dataset, tensor_to_rgb, Sample};
use crate::error::{Error, Result};
use crate::instance::InstanceSegmentation;
use crate::metrics::{evaluate, EvalMode, EvalSettings, ImagePrediction, MetricsReport};
use crate::postprocess::{decode_and_filter, merge_masks, nms, stub_mask_decoder, Bridge, Detection, MaskStack, PromptFile};
use crate::tensor::Tensor;

pub struct Pipeline {
    pub detector: Detector,
    pub features: Features,
    pub config: RunConfig,
}

impl Pipeline {
    pub fn new(detector: Detector, config: RunConfig) -> Result<Self> {
        let features = Features::new(&config.encoder, &config.model.encoder)?;
        Ok(Pipeline {
            detector,
            features,
            config,
        })
    }

    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (detector, manifest) = load_checkpoint(dir)?;
        Pipeline::new(detector, manifest.config)
    }

    fn check_size(&self, name: &str, image: &Tensor) -> Result<()> {
        let s = self.config.model.image_size();
        let [c, h, w] = image.dims3("detect")?;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Invalid(format!(
                "{name}: image is {w}x{h} with {c} channels; the model takes {s}x{s} RGB (no resizing is done)"
            )));
        }
        Ok(())
    }

    /// Suppressed detections above the ranking threshold, per image.
    pub fn detect_batch(&self, items: &[(&str, &Tensor)]) -> Result<Vec<Vec<Detection>>> {
        for (name, img) in items {
            self.check_size(name, img)?;
        }
        let layers = self.features.batch(items)?;
        let raw = self.detector.infer(&layers)?;
        let s = self.config.model.image_size() as f32;
        let post = &self.config.post;
        raw.iter()
            .map(|(logits, deltas)| {
                let dets = decode_and_filter(
                    logits,
                    deltas,
                    &self.detector.anchors.boxes,
                    self.config.model.num_classes,
                    (s, s),
                    post.score_threshold,
                    post.max_detections,
                )?;
                Ok(nms(&dets, post.nms_iou))
            })
            .collect()
    }

    pub fn prompts(&self, image_id: &str, dets: &[Detection]) -> PromptFile {
        let keep: Vec<Detection> = dets.iter().filter(|d| d.score >= self.config.post.prompt_threshold).copied().collect();
        PromptFile::from_detections(image_id, &keep)
    }

    /// Stub masks merged into an instance map.
    pub fn segment_stub(&self, prompts: &PromptFile) -> Result<InstanceSegmentation> {
        let s = self.config.model.image_size();
        let stack = stub_mask_decoder(prompts, s, s, self.config.post.mask_mode);
        merge_prompts(&stack, prompts)
    }

    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<ImagePrediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let items: Vec<(&str, &Tensor)> = chunk.iter().map(|s| (s.name.as_str(), &s.image)).collect();
            for (s, dets) in chunk.iter().zip(self.detect_batch(&items)?) {
                let seg = self.segment_stub(&self.prompts(&s.name, &dets))?;
                out.push(ImagePrediction {
                    detections: dets,
                    segmentation: seg,
                });
            }
        }
        Ok(out)
    }

    pub fn evaluate_samples(&self, samples: &[Sample], num_classes: usize, class_names: &[String], mode: EvalMode) -> Result<(MetricsReport, Vec<ImagePrediction>)> {
        let preds = self.predict(samples)?;
        let gts: Vec<InstanceSegmentation> = samples.iter().map(|s| s.gt.clone()).collect();
        let settings = EvalSettings {
            mpq: self.config.mpq_averaging,
            ..Default::default()
        };
        let report = evaluate(&preds, &gts, num_classes, class_names, mode, &settings)?;
        Ok((report, preds))
    }
}

pub fn merge_prompts(stack: &MaskStack, prompts: &PromptFile) -> Result<InstanceSegmentation> {
    let classes: Vec<u32> = prompts.boxes.iter().map(|b| b.class).collect();
    let scores: Vec<f32> = prompts.boxes.iter().map(|b| b.score).collect();
    merge_masks(stack, &classes, &scores)
}

/// Ground truth as its own prediction: every instance becomes a score-1
/// detection with its tight box, and the instance map is reused as-is.
pub fn oracle_prediction(gt: &InstanceSegmentation) -> ImagePrediction {
    ImagePrediction {
        detections: gt
            .instances()
            .iter()
            .map(|i| Detection {
                bbox: i.bbox,
                class: i.class,
                score: 1.0,
            })
            .collect(),
        segmentation: gt.clone(),
    }
}

const OVERLAY_COLORS: [[u8; 3]; 6] = [[0, 200, 0], [230, 40, 40], [30, 90, 240], [240, 170, 0], [160, 0, 200], [0, 190, 190]];

/// Image with instance pixels tinted by class and prompt boxes outlined.
pub fn write_overlay(path: &Path, image: &Tensor, seg: &InstanceSegmentation, prompts: &PromptFile) -> Result<()> {
    let mut img = tensor_to_rgb(image)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (seg.height, seg.width) != (h, w) {
        return Err(Error::shape("overlay", "image and instance map sizes differ"));
    }
    for (p, &id) in seg.ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let col = OVERLAY_COLORS[(seg.class_of(id) as usize - 1) % OVERLAY_COLORS.len()];
        let px = img.get_pixel_mut((p % w) as u32, (p / w) as u32);
        for c in 0..3 {
            px[c] = ((px[c] as u16 + col[c] as u16) / 2) as u8;
        }
    }
    for b in &prompts.boxes {
        let col = Rgb(OVERLAY_COLORS[(b.class as usize - 1) % OVERLAY_COLORS.len()]);
        let x1 = (b.x1.max(0.0) as usize).min(w - 1);
        let x2 = ((b.x2 - 1.0).max(0.0) as usize).min(w - 1);
        let y1 = (b.y1.max(0.0) as usize).min(h - 1);
        let y2 = ((b.y2 - 1.0).max(0.0) as usize).min(h - 1);
        for x in x1..=x2 {
            img.put_pixel(x as u32, y1 as u32, col);
            img.put_pixel(x as u32, y2 as u32, col);
        }
        for y in y1..=y2 {
            img.put_pixel(x1 as u32, y as u32, col);
            img.put_pixel(x2 as u32, y as u32, col);
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `evaluate --ckpt --data --mode`: writes `report.json`, `confusion.csv`
/// and overlays into `out`.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path, mode: EvalMode, out: &Path) -> Result<MetricsReport> {
    let pipeline = Pipeline::from_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    if ds.manifest.num_classes != pipeline.config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint was trained for {}",
            ds.manifest.num_classes, pipeline.config.model.num_classes
        )));
    }
    let (report, preds) = pipeline.evaluate_samples(&ds.samples, ds.manifest.num_classes, &ds.manifest.class_names, mode)?;
    report.write(out)?;
    write_overlays(&out.join("overlays"), &ds.samples, &preds, &pipeline, pipeline.config.overlays)?;
    Ok(report)
}

pub fn write_overlays(dir: &Path, samples: &[Sample], preds: &[ImagePrediction], pipeline: &Pipeline, limit: usize) -> Result<()> {
    if limit == 0 {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, p) in samples.iter().zip(preds).take(limit) {
        let prompts = pipeline.prompts(&s.name, &p.detections);
        write_overlay(&dir.join(format!("{}.png", s.name)), &s.image, &p.segmentation, &prompts)?;
    }
    Ok(())
}

/// What `detect` produced for one image.
#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub prompts: PromptFile,
    pub segmentation: Option<InstanceSegmentation>,
    pub detections_above_threshold: usize,
}

/// `detect --ckpt --image [--emit-masks] [--use-bridge cmd]`: writes
/// `<stem>.prompts.json` and, with masks, `<stem>.instances.tsr` and
/// `<stem>.overlay.png` into `out`.
pub fn detect_image(ckpt: &Path, image_path: &Path, emit_masks: bool, bridge: Option<&Bridge>, out: &Path, post: Option<PostConfig>) -> Result<DetectOutput> {
    let mut pipeline = Pipeline::from_checkpoint(ckpt)?;
    if let Some(p) = post {
        pipeline.config.post = p;
    }
    if pipeline.features.is_precomputed() {
        return Err(Error::Config(
            "this checkpoint reads precomputed embeddings; detect needs the archive under the configured directory".into(),
        ));
    }
    let image = crate::data::read_png(image_path)?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let dets = pipeline.detect_batch(&[(stem.as_str(), &image)])?.remove(0);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let prompts = pipeline.prompts(&stem, &dets);
    let prompts_path = out.join(format!("{stem}.prompts.json"));
    prompts.write(&prompts_path)?;
    let segmentation = if emit_masks {
        let s = pipeline.config.model.image_size();
        let stack = match bridge {
            Some(b) => b.decode_masks(&prompts_path, &prompts, image_path, &out.join(format!("{stem}.masks.tsr")), (s, s))?,
            None => stub_mask_decoder(&prompts, s, s, pipeline.config.post.mask_mode),
        };
        let seg = merge_prompts(&stack, &prompts)?;
        seg.write_ids(&out.join(format!("{stem}.instances.tsr")))?;
        write_overlay(&out.join(format!("{stem}.overlay.png")), &image, &seg, &prompts)?;
        Some(seg)
    } else {
        None
    };
    Ok(DetectOutput {
        detections_above_threshold: prompts.boxes.len(),
        prompts,
        segmentation,
    })
}
