//! Decoder + detection head over frozen encoder features.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, PyramidDecoder};
use crate::detect::{generate_anchors, AnchorConfig, Anchors, DetectionHead, HeadConfig, HeadVars};
use crate::encoder::{block_indices, load_embeddings, EncoderConfig, ToyEncoder};
use crate::error::{Error, Result};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Trainable parameter count the paper reports for its full configuration.
pub const PAPER_TRAINABLE_PARAMETERS: usize = 43_910_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub anchors: AnchorConfig,
    pub head_depth: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Toy encoder at `image_size` with patch `patch`, pyramid width `channels`.
    pub fn toy(image_size: usize, patch: usize, embed_dim: usize, channels: usize, num_classes: usize) -> Self {
        let encoder = EncoderConfig {
            patch_size: patch,
            embed_dim,
            image_size,
            ..Default::default()
        };
        let decoder = DecoderConfig {
            channels,
            input_channels: embed_dim,
            base_size: image_size / patch,
            ..DecoderConfig::toy()
        };
        ModelConfig {
            encoder,
            decoder,
            anchors: AnchorConfig::default(),
            head_depth: 4,
            num_classes,
        }
    }

    /// Base-ViT features (768 × 64 × 64) with a 256-wide pyramid.
    pub fn full(num_classes: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::vit_base(),
            decoder: DecoderConfig::full(),
            anchors: AnchorConfig::default(),
            head_depth: 4,
            num_classes,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            channels: self.decoder.channels,
            num_classes: self.num_classes,
            anchors_per_cell: self.anchors.per_cell(),
            depth: self.head_depth,
            levels: self.anchors.levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.input_channels != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "decoder expects {} input channels but the encoder emits {}",
                self.decoder.input_channels, self.encoder.embed_dim
            )));
        }
        if self.decoder.base_size != self.encoder.grid_size() {
            return Err(Error::Config(format!(
                "decoder base size {} differs from the encoder grid {}",
                self.decoder.base_size,
                self.encoder.grid_size()
            )));
        }
        if self.anchors.levels != 6 {
            return Err(Error::Config(format!("the pyramid has 6 levels, anchor config has {}", self.anchors.levels)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.encoder.image_size
    }

    pub fn generate_anchors(&self) -> Result<Anchors> {
        generate_anchors(&self.anchors, &self.decoder.level_sizes(), self.encoder.image_size)
    }
}

/// The trainable part of the pipeline with its parameters.
#[derive(Debug, Clone)]
pub struct Detector<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub decoder: PyramidDecoder,
    pub head: DetectionHead,
    pub anchors: Anchors,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let decoder = PyramidDecoder::new(&mut store, config.decoder.clone(), &mut rng)?;
        let head = DetectionHead::new(&mut store, config.head_config(), &mut rng)?;
        let anchors = config.generate_anchors()?;
        Ok(Detector {
            config,
            store,
            decoder,
            head,
            anchors,
        })
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    /// Records the forward pass for per-layer features `[N, D, S, S]`.
    pub fn forward(&self, tape: &mut Tape<T>, layers: &[Var]) -> Result<HeadVars> {
        forward_with(&self.decoder, &self.head, &self.config.encoder, tape, &self.store, layers)
    }

    /// Eval-mode logits `[A·K]` and deltas `[A·4]` for each image of a batch.
    pub fn infer(&self, layers: &[Tensor<T>]) -> Result<Vec<(Vec<T>, Vec<T>)>> {
        let mut tape = Tape::new(false);
        let vars: Vec<Var> = layers.iter().map(|t| tape.input(t.clone())).collect();
        let out = self.forward(&mut tape, &vars)?;
        let logits = tape.value(out.logits);
        let deltas = tape.value(out.deltas);
        let n = logits.shape()[0];
        let (lk, dk) = (logits.numel() / n, deltas.numel() / n);
        Ok((0..n)
            .map(|i| {
                (
                    logits.data()[i * lk..(i + 1) * lk].to_vec(),
                    deltas.data()[i * dk..(i + 1) * dk].to_vec(),
                )
            })
            .collect())
    }
}

/// Forward through decoder and head, partitioning layers into the four blocks.
pub fn forward_with<T: Scalar>(
    decoder: &PyramidDecoder,
    head: &DetectionHead,
    encoder: &EncoderConfig,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layers: &[Var],
) -> Result<HeadVars> {
    if layers.len() != encoder.layer_count {
        return Err(Error::shape(
            "detector",
            format!("{} layer features for a {}-layer encoder", layers.len(), encoder.layer_count),
        ));
    }
    let idx = block_indices(encoder)?;
    let blocks = idx.map(|b| b.map(|i| layers[i]));
    let pyramid = decoder.forward(tape, store, blocks)?;
    head.forward_pyramid(tape, store, &pyramid)
}

/// Where frozen encoder features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSource {
    /// Seeded toy encoder computed on the fly.
    Toy { seed: u64 },
    /// One embedding archive per sample at `<dir>/<sample name>/`.
    Embeddings { dir: PathBuf },
}

/// Materialized feature provider.
#[derive(Debug, Clone)]
pub enum Features {
    Toy(ToyEncoder),
    Embeddings { dir: PathBuf, config: EncoderConfig },
}

impl Features {
    pub fn new(source: &EncoderSource, config: &EncoderConfig) -> Result<Self> {
        Ok(match source {
            EncoderSource::Toy { seed } => Features::Toy(ToyEncoder::new(config.clone(), *seed)?),
            EncoderSource::Embeddings { dir } => Features::Embeddings {
                dir: dir.clone(),
                config: config.clone(),
            },
        })
    }

    pub fn is_precomputed(&self) -> bool {
        matches!(self, Features::Embeddings { .. })
    }

    /// Per-layer `[N, D, S, S]` features for named images `[3, H, W]`.
    pub fn batch(&self, items: &[(&str, &Tensor)]) -> Result<Vec<Tensor>> {
        match self {
            Features::Toy(enc) => {
                let images: Vec<Tensor> = items.iter().map(|(_, t)| (*t).clone()).collect();
                enc.forward_batch(&Tensor::stack(&images)?)
            }
            Features::Embeddings { dir, config } => {
                let per: Vec<Vec<Tensor>> = items
                    .iter()
                    .map(|(name, _)| {
                        let f = load_embeddings(&dir.join(name))?;
                        if f.config != *config {
                            return Err(Error::Config(format!(
                                "embedding archive for {name} has layout {:?}, model expects {:?}",
                                f.config, config
                            )));
                        }
                        Ok(f.features)
                    })
                    .collect::<Result<_>>()?;
                (0..config.layer_count)
                    .map(|l| Tensor::stack(&per.iter().map(|p| p[l].clone()).collect::<Vec<_>>()))
                    .collect()
            }
        }
    }

    /// Fingerprint of everything frozen: encoder weights or archive bytes.
    pub fn fingerprint(&self) -> Result<Vec<u64>> {
        use std::hash::{DefaultHasher, Hash, Hasher};
        match self {
            Features::Toy(enc) => Ok(enc
                .params()
                .params()
                .map(|(_, p)| {
                    let mut h = DefaultHasher::new();
                    for v in p.value.data() {
                        v.to_bits().hash(&mut h);
                    }
                    p.trainable.hash(&mut h);
                    h.finish()
                })
                .collect()),
            Features::Embeddings { dir, .. } => {
                let mut files = Vec::new();
                collect_files(dir, &mut files)?;
                files.sort();
                files
                    .iter()
                    .map(|f| {
                        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
                        let mut h = DefaultHasher::new();
                        bytes.hash(&mut h);
                        Ok(h.finish())
                    })
                    .collect()
            }
        }
    }
}

fn collect_files(dir: &std::path::Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Our trainable count for the full configuration next to the paper's figure.
pub fn full_config_parameter_report(num_classes: usize) -> Result<(usize, usize)> {
    let det: Detector<f32> = Detector::new(ModelConfig::full(num_classes), 0)?;
    Ok((det.trainable_parameters(), PAPER_TRAINABLE_PARAMETERS))
}
