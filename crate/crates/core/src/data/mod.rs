//! Dataset layout, samples with derived geometry, synthetic data,
//! augmentation and fold splitting.
//!
//! On disk a dataset is
//! ```text
//! root/manifest.json          {"num_classes": K, "class_names": [...]}
//! root/images/<name>.png      RGB
//! root/instances/<name>.tsr   [H, W] instance ids (0 = background)
//! root/classes/<name>.json    {"classes": [class of id 1, class of id 2, ...]}
//! ```

pub mod augment;
pub mod folds;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::detect::GtBox;
use crate::error::{Error, Result};
use crate::instance::{InstanceInfo, InstanceSegmentation};
use crate::tensor::Tensor;

pub use augment::{augment, sample_seed, AugmentConfig, Transform};
pub use folds::{split_folds, FoldSplit};
pub use synth::{synth_generate, synth_image, SynthConfig, SynthImage, SynthSummary};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassFile {
    classes: Vec<u32>,
}

/// One image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub gt: InstanceSegmentation,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.gt.height, self.gt.width)
    }

    pub fn instances(&self) -> Vec<InstanceInfo> {
        self.gt.instances()
    }

    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.instances()
            .iter()
            .map(|i| GtBox {
                bbox: i.bbox,
                class: i.class,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn class_name(&self, class: u32) -> String {
        self.manifest
            .class_names
            .get(class as usize - 1)
            .cloned()
            .unwrap_or_else(|| format!("class{class}"))
    }
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image tensor shape")
}

pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let [c, h, w] = image.dims3("tensor_to_rgb")?;
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb", format!("{c} channels")));
    }
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let q = |ch: usize| (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    }))
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    tensor_to_rgb(image)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn dirs(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (root.join("images"), root.join("instances"), root.join("classes"))
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.num_classes == 0 {
        return Err(Error::Invalid(format!("{}: num_classes must be at least 1", path.display())));
    }
    Ok(m)
}

/// Writes one sample into the layout (directories must exist).
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let (images, instances, classes) = dirs(root);
    write_png(&images.join(format!("{}.png", sample.name)), &sample.image)?;
    sample.gt.write_ids(&instances.join(format!("{}.tsr", sample.name)))?;
    let path = classes.join(format!("{}.json", sample.name));
    let text = serde_json::to_string(&ClassFile {
        classes: sample.gt.classes.clone(),
    })
    .map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn create_layout(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let (images, instances, classes) = dirs(root);
    for d in [&images, &instances, &classes] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    write_manifest(root, manifest)
}

pub fn load_sample(root: &Path, name: &str, num_classes: usize) -> Result<Sample> {
    let (images, instances, classes) = dirs(root);
    let img_path = images.join(format!("{name}.png"));
    let ids_path = instances.join(format!("{name}.tsr"));
    let cls_path = classes.join(format!("{name}.json"));
    let image = read_png(&img_path)?;
    let (h, w, ids) = InstanceSegmentation::read_ids(&ids_path)?;
    let [_, ih, iw] = image.dims3("load_sample")?;
    if (ih, iw) != (h, w) {
        return Err(Error::Invalid(format!(
            "{} is {iw}x{ih} but {} is {w}x{h}",
            img_path.display(),
            ids_path.display()
        )));
    }
    let text = fs::read_to_string(&cls_path).map_err(|e| Error::io(&cls_path, e))?;
    let cf: ClassFile = serde_json::from_str(&text).map_err(|e| Error::json(&cls_path, e))?;
    if let Some(&c) = cf.classes.iter().find(|&&c| c == 0 || c as usize > num_classes) {
        return Err(Error::Invalid(format!(
            "{}: unknown class id {c} (dataset has {num_classes} classes)",
            cls_path.display()
        )));
    }
    let gt = InstanceSegmentation::new(h, w, ids, cf.classes, None)
        .map_err(|e| Error::Invalid(format!("{} / {}: {e}", ids_path.display(), cls_path.display())))?;
    Ok(Sample {
        name: name.to_string(),
        image,
        gt,
    })
}

/// Loads every sample under `root`, sorted by file name.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let images = root.join("images");
    let mut names: Vec<String> = fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "png").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    names.sort();
    let samples = names
        .iter()
        .map(|n| load_sample(root, n, manifest.num_classes))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, samples })
}
