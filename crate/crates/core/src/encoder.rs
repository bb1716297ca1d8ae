//! Frozen encoder features: a seeded toy stand-in, embedding archives
//! exported from a real encoder, and the four-block layer partition.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init, LayerSpec};
use crate::tape::ParamStore;
use crate::tensor::Tensor;
use crate::tsr;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layer_count: usize,
    pub global_attention_indices: Vec<usize>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layer_count: 12,
            global_attention_indices: vec![2, 5, 8, 11],
            patch_size: 16,
            embed_dim: 32,
            image_size: 256,
        }
    }
}

impl EncoderConfig {
    /// Layout of the 12-layer base ViT with 768-wide embeddings on 1024² inputs.
    pub fn vit_base() -> Self {
        EncoderConfig {
            embed_dim: 768,
            image_size: 1024,
            ..Default::default()
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.global_attention_indices;
        if g.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 global-attention indices, got {}",
                g.len()
            )));
        }
        if g.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "global-attention indices must be strictly increasing: {g:?}"
            )));
        }
        if g[3] >= self.layer_count {
            return Err(Error::Config(format!(
                "global-attention index {} out of range for {} layers",
                g[3], self.layer_count
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer encoder outputs, each `[D, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub features: Vec<Tensor>,
    pub config: EncoderConfig,
}

impl LayerFeatures {
    pub fn new(features: Vec<Tensor>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        if features.len() != config.layer_count {
            return Err(Error::Invalid(format!(
                "{} feature maps for {} layers",
                features.len(),
                config.layer_count
            )));
        }
        let s = config.grid_size();
        let expected = [config.embed_dim, s, s];
        for (i, f) in features.iter().enumerate() {
            if f.shape() != expected {
                return Err(Error::shape(
                    "layer features",
                    format!("layer {i} has shape {:?}, expected {expected:?}", f.shape()),
                ));
            }
            if !f.all_finite() {
                return Err(Error::NonFinite(format!("layer {i} features")));
            }
        }
        Ok(LayerFeatures { features, config })
    }

    /// Output of the final encoder layer (the mask decoder's image embedding).
    pub fn last(&self) -> &Tensor {
        self.features.last().expect("at least one layer")
    }
}

/// The four blocks of three consecutive layers, each ending at a
/// global-attention layer. Returns layer indices.
pub fn block_indices(config: &EncoderConfig) -> Result<[[usize; 3]; 4]> {
    config.validate()?;
    let g = &config.global_attention_indices;
    let mut blocks = [[0; 3]; 4];
    let mut next = 0;
    for (i, &end) in g.iter().enumerate() {
        if end < 2 || end - 2 != next {
            return Err(Error::Config(format!(
                "global-attention indices {g:?} do not split {} layers into consecutive runs of 3",
                config.layer_count
            )));
        }
        blocks[i] = [end - 2, end - 1, end];
        next = end + 1;
    }
    if next != config.layer_count {
        return Err(Error::Config(format!(
            "blocks cover {next} of {} layers",
            config.layer_count
        )));
    }
    Ok(blocks)
}

pub fn partition_blocks(features: &LayerFeatures) -> Result<[[&Tensor; 3]; 4]> {
    let idx = block_indices(&features.config)?;
    Ok(idx.map(|b| b.map(|l| &features.features[l])))
}

/// Seeded, never-trained feature extractor: a patchify projection followed
/// by residual 3×3 mixing layers. Every parameter is frozen.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    pub seed: u64,
    store: ParamStore<f32>,
    patchify: Conv2d,
    mixers: Vec<Conv2d>,
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let patchify = Conv2d::new(
            &mut store,
            "encoder.patchify",
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: d,
                kernel: config.patch_size,
                stride: config.patch_size,
                padding: 0,
            },
            true,
            Init::HeUniform,
            false,
            &mut rng,
        )?;
        let mix_std = (0.5 / (9.0 * d as f64)).sqrt();
        let mixers = (0..config.layer_count)
            .map(|l| {
                Conv2d::new(
                    &mut store,
                    &format!("encoder.layer{l:02}"),
                    LayerSpec::conv3x3(d, d),
                    true,
                    Init::Normal(mix_std),
                    false,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(ToyEncoder {
            config,
            seed,
            store,
            patchify,
            mixers,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Features for a batch `[N, 3, H, W]`: one `[N, D, S, S]` tensor per layer.
    pub fn forward_batch(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let [_, c, h, w] = images.dims4("toy encoder")?;
        if c != 3 || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::shape(
                "toy encoder",
                format!(
                    "expected [N, 3, {r}, {r}], got {:?}",
                    images.shape(),
                    r = self.config.image_size
                ),
            ));
        }
        let mut h = self.patchify.apply(&self.store, images)?;
        let mut out = Vec::with_capacity(self.mixers.len());
        for m in &self.mixers {
            let delta = m.apply(&self.store, &h)?;
            for (v, d) in h.data_mut().iter_mut().zip(delta.data()) {
                *v += d.tanh();
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn forward(&self, image: &Tensor) -> Result<LayerFeatures> {
        let [c, h, w] = image.dims3("toy encoder")?;
        let batch = image.clone().reshape(&[1, c, h, w])?;
        let features = self
            .forward_batch(&batch)?
            .into_iter()
            .map(|t| t.index0(0))
            .collect();
        LayerFeatures::new(features, self.config.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub layer_count: usize,
    pub global_attention_indices: Vec<usize>,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default)]
    pub embed_dim: Option<usize>,
    /// Which activation each layer file holds, e.g. `"post_layer"`.
    #[serde(default)]
    pub tap: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
}

pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer:02}.tsr")
}

/// Writes `dir/manifest.json` plus one TSR1 file per layer.
pub fn save_embeddings(features: &LayerFeatures, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &features.config;
    let manifest = EmbeddingManifest {
        layer_count: c.layer_count,
        global_attention_indices: c.global_attention_indices.clone(),
        patch_size: c.patch_size,
        image_size: c.image_size,
        embed_dim: Some(c.embed_dim),
        tap: Some("post_layer".into()),
        model: None,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (i, f) in features.features.iter().enumerate() {
        tsr::write(&dir.join(layer_file_name(i)), f)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<EmbeddingManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Loads and validates an embedding archive directory.
pub fn load_embeddings(dir: &Path) -> Result<LayerFeatures> {
    let m = read_manifest(dir)?;
    let mut features = Vec::with_capacity(m.layer_count);
    for i in 0..m.layer_count {
        let path = dir.join(layer_file_name(i));
        if !path.exists() {
            return Err(Error::Invalid(format!(
                "{}: manifest declares {} layers but layer {i} ({}) is missing",
                dir.display(),
                m.layer_count,
                layer_file_name(i)
            )));
        }
        features.push(tsr::read(&path)?.into_tensor::<f32>()?);
    }
    let extra = dir.join(layer_file_name(m.layer_count));
    if extra.exists() {
        return Err(Error::Invalid(format!(
            "{}: found {} beyond the {} layers in the manifest",
            dir.display(),
            layer_file_name(m.layer_count),
            m.layer_count
        )));
    }
    let first = features
        .first()
        .ok_or_else(|| Error::Invalid(format!("{}: manifest declares zero layers", dir.display())))?;
    let [d, ..] = first.dims3("embedding")?;
    if let Some(md) = m.embed_dim {
        if md != d {
            return Err(Error::Invalid(format!(
                "{}: manifest embed_dim {md} but layer 0 has {d} channels",
                dir.display()
            )));
        }
    }
    let config = EncoderConfig {
        layer_count: m.layer_count,
        global_attention_indices: m.global_attention_indices,
        patch_size: m.patch_size,
        embed_dim: d,
        image_size: m.image_size,
    };
    LayerFeatures::new(features, config)
}
