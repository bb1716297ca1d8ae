//! Decoding head outputs into detections, suppression, box prompts and
//! per-box mask assembly.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::detect::{decode_deltas, BBox};
use crate::error::{Error, Result};
use crate::instance::InstanceSegmentation;
use crate::tsr;

pub const DEFAULT_SCORE_THRESHOLD: f32 = 0.05;
pub const DEFAULT_MAX_DETECTIONS: usize = 1000;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// 1-based class id.
    pub class: u32,
    pub score: f32,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Descending score; ties keep input order. `sort_by` is stable.
fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Decodes every (anchor, class) pair scoring at least `score_thr`, clips to
/// the image, drops boxes that clip to nothing, and keeps the `max_det`
/// highest scores. `logits` is `[A, K]`, `deltas` is `[A, 4]`.
pub fn decode_and_filter(
    logits: &[f32],
    deltas: &[f32],
    anchors: &[BBox],
    num_classes: usize,
    image: (f32, f32),
    score_thr: f32,
    max_det: usize,
) -> Result<Vec<Detection>> {
    let a = anchors.len();
    if logits.len() != a * num_classes || deltas.len() != a * 4 {
        return Err(Error::shape(
            "decode_and_filter",
            format!(
                "{a} anchors x {num_classes} classes vs {} logits and {} deltas",
                logits.len(),
                deltas.len()
            ),
        ));
    }
    let mut out = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        if row.iter().all(|&z| sigmoid(z) < score_thr) {
            continue;
        }
        let d = &deltas[i * 4..i * 4 + 4];
        let bbox = decode_deltas(anchor, [d[0] as f64, d[1] as f64, d[2] as f64, d[3] as f64]).clip(image.0, image.1);
        if !bbox.is_valid() {
            continue;
        }
        for (k, &z) in row.iter().enumerate() {
            let score = sigmoid(z);
            if score >= score_thr {
                out.push(Detection {
                    bbox,
                    class: k as u32 + 1,
                    score,
                });
            }
        }
    }
    sort_by_score(&mut out);
    out.truncate(max_det);
    Ok(out)
}

/// Greedy class-wise suppression: a box is dropped when it overlaps an
/// already-kept box of the same class with IoU > `iou_thr`. Output is in
/// descending score, equal scores in input order.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= iou_thr) {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class: u32,
    pub score: f32,
}

/// Box prompts for one image, in original-image pixels, descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFile {
    pub image_id: String,
    pub boxes: Vec<PromptBox>,
}

impl PromptFile {
    pub fn from_detections(image_id: &str, dets: &[Detection]) -> Self {
        let mut dets = dets.to_vec();
        sort_by_score(&mut dets);
        PromptFile {
            image_id: image_id.to_string(),
            boxes: dets
                .iter()
                .map(|d| PromptBox {
                    x1: d.bbox.x1,
                    y1: d.bbox.y1,
                    x2: d.bbox.x2,
                    y2: d.bbox.y2,
                    class: d.class,
                    score: d.score,
                })
                .collect(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.boxes
            .iter()
            .map(|b| Detection {
                bbox: BBox::new(b.x1, b.y1, b.x2, b.y2),
                class: b.class,
                score: b.score,
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn emit_prompts(dets: &[Detection], image_id: &str, path: &Path) -> Result<PromptFile> {
    let file = PromptFile::from_detections(image_id, dets);
    file.write(path)?;
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Inscribed ellipse of each box.
    #[default]
    Ellipse,
    Rect,
}

/// Binary `[H, W]` masks for a list of boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Vec<bool>>,
}

impl MaskStack {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.masks.iter().flatten().map(|&b| b as u8 as f32).collect();
        tsr::write_raw(path, &[self.masks.len(), self.height, self.width], &data)
    }

    /// Reads an `[N, H, W]` tensor of {0, 1}.
    pub fn read(path: &Path) -> Result<Self> {
        let (shape, data) = tsr::read(path)?.into_values::<f32>();
        let [n, h, w] = shape[..] else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("mask stack must be rank 3, got {shape:?}"),
            });
        };
        if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("{}: mask value {v} is not 0 or 1", path.display())));
        }
        let masks = (0..n)
            .map(|i| data[i * h * w..(i + 1) * h * w].iter().map(|&v| v == 1.0).collect())
            .collect();
        Ok(MaskStack {
            height: h,
            width: w,
            masks,
        })
    }
}

/// Stand-in for the frozen mask decoder: a pixel belongs to a box's mask when
/// its center lies inside the box (rect) or its inscribed ellipse.
pub fn stub_mask_decoder(prompts: &PromptFile, height: usize, width: usize, mode: MaskMode) -> MaskStack {
    let masks = prompts
        .boxes
        .iter()
        .map(|b| {
            let mut m = vec![false; height * width];
            let (x1, y1, x2, y2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
            let (cx, cy) = (0.5 * (x1 + x2), 0.5 * (y1 + y2));
            let (a, bb) = (0.5 * (x2 - x1), 0.5 * (y2 - y1));
            let r0 = y1.floor().max(0.0) as usize;
            let r1 = (y2.ceil().max(0.0) as usize).min(height);
            let c0 = x1.floor().max(0.0) as usize;
            let c1 = (x2.ceil().max(0.0) as usize).min(width);
            for r in r0..r1 {
                let py = r as f64 + 0.5;
                for c in c0..c1 {
                    let px = c as f64 + 0.5;
                    let inside_rect = px > x1 && px < x2 && py > y1 && py < y2;
                    let inside = match mode {
                        MaskMode::Rect => inside_rect,
                        MaskMode::Ellipse => {
                            inside_rect && ((px - cx) / a).powi(2) + ((py - cy) / bb).powi(2) <= 1.0
                        }
                    };
                    m[r * width + c] = inside;
                }
            }
            m
        })
        .collect();
    MaskStack { height, width, masks }
}

/// Assembles an instance map: overlapping pixels go to the highest-score
/// mask (ties to the earlier mask); instances left without pixels are
/// dropped; survivors are numbered 1.. in descending score.
pub fn merge_masks(stack: &MaskStack, classes: &[u32], scores: &[f32]) -> Result<InstanceSegmentation> {
    let n = stack.len();
    if classes.len() != n || scores.len() != n {
        return Err(Error::shape(
            "merge_masks",
            format!("{n} masks, {} classes, {} scores", classes.len(), scores.len()),
        ));
    }
    let pixels = stack.height * stack.width;
    if let Some(i) = stack.masks.iter().position(|m| m.len() != pixels) {
        return Err(Error::shape("merge_masks", format!("mask {i} is not {}x{}", stack.height, stack.width)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    // Highest priority first: a pixel keeps the first owner it gets.
    let mut owner = vec![usize::MAX; pixels];
    for &i in &order {
        for (p, &on) in stack.masks[i].iter().enumerate() {
            if on && owner[p] == usize::MAX {
                owner[p] = i;
            }
        }
    }
    let mut area = vec![0usize; n];
    for &o in &owner {
        if o != usize::MAX {
            area[o] += 1;
        }
    }
    let mut new_id = vec![0u32; n];
    let mut out_classes = Vec::new();
    let mut out_scores = Vec::new();
    for &i in &order {
        if area[i] > 0 {
            out_classes.push(classes[i]);
            out_scores.push(scores[i]);
            new_id[i] = out_classes.len() as u32;
        }
    }
    let ids = owner.iter().map(|&o| if o == usize::MAX { 0 } else { new_id[o] }).collect();
    InstanceSegmentation::new(stack.height, stack.width, ids, out_classes, Some(out_scores))
}

/// External mask decoder invoked as
/// `<program> [args..] decode-masks --prompts P --image I --out O`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge {
    pub command: Vec<String>,
}

impl Bridge {
    pub fn parse(command: &str) -> Result<Self> {
        let command: Vec<String> = command.split_whitespace().map(str::to_string).collect();
        if command.is_empty() {
            return Err(Error::Config("bridge command is empty".into()));
        }
        Ok(Bridge { command })
    }

    pub fn decode_masks(
        &self,
        prompts_path: &Path,
        prompts: &PromptFile,
        image_path: &Path,
        out: &Path,
        size: (usize, usize),
    ) -> Result<MaskStack> {
        let status = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg("decode-masks")
            .arg("--prompts")
            .arg(prompts_path)
            .arg("--image")
            .arg(image_path)
            .arg("--out")
            .arg(out)
            .status()
            .map_err(|e| Error::External(format!("cannot run bridge `{}`: {e}", self.command.join(" "))))?;
        if !status.success() {
            return Err(Error::External(format!("bridge `{}` exited with {status}", self.command.join(" "))));
        }
        let stack = MaskStack::read(out)?;
        if stack.len() != prompts.boxes.len() || (stack.height, stack.width) != size {
            return Err(Error::External(format!(
                "bridge returned {} masks of {}x{} for {} prompts on a {}x{} image",
                stack.len(),
                stack.height,
                stack.width,
                prompts.boxes.len(),
                size.0,
                size.1
            )));
        }
        Ok(stack)
    }
}

/// Where masks come from when segmenting detections.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    Stub(MaskMode),
    Bridge { bridge: Bridge, work_dir: PathBuf },
}
