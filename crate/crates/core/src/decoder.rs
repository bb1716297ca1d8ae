//! Trainable projection decoder: six projection layers that turn the four
//! frozen encoder blocks into a six-level feature pyramid.
//!
//! Level sizes for a base grid `S` are `(2S, S, S/2, S/4, S/8, S/16)`.
//! `p1` upsamples, `p2` keeps the grid, `p3`/`p4` downsample by 2 and 4,
//! and `p5`/`p6` halve `z4` twice more. Each of `p1..p4` runs three
//! conv+BN+ReLU stages followed by a dense conv → ReLU → BN stage, then adds
//! the resampled output of the previous level (the skip chain).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Init, LayerSpec};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How the three layer maps of a block are merged before the first conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Concat,
    Sum,
}

/// Skip wiring between projection levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// p1→p2→p3→p4, each previous output resampled and added.
    #[default]
    Chained,
    /// Only p1's output, resampled, is added into p4.
    Direct,
    /// No skip connections (ablation).
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub input_channels: usize,
    pub base_size: usize,
    #[serde(default)]
    pub combine: Combine,
    #[serde(default)]
    pub skip: SkipMode,
}

impl DecoderConfig {
    pub fn toy() -> Self {
        DecoderConfig {
            channels: 64,
            input_channels: 32,
            base_size: 16,
            combine: Combine::Concat,
            skip: SkipMode::Chained,
        }
    }

    pub fn full() -> Self {
        DecoderConfig {
            channels: 256,
            input_channels: 768,
            base_size: 64,
            combine: Combine::Concat,
            skip: SkipMode::Chained,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("decoder channel counts must be positive".into()));
        }
        if self.base_size < 16 || self.base_size % 16 != 0 {
            return Err(Error::Config(format!(
                "base grid {} must be a positive multiple of 16 for six distinct levels",
                self.base_size
            )));
        }
        Ok(())
    }

    /// Spatial sizes of z1..z6.
    pub fn level_sizes(&self) -> [usize; 6] {
        let s = self.base_size;
        [2 * s, s, s / 2, s / 4, s / 8, s / 16]
    }

    fn block_channels(&self) -> usize {
        match self.combine {
            Combine::Concat => 3 * self.input_channels,
            Combine::Sum => self.input_channels,
        }
    }
}

const DOWN_KERNEL: usize = 4;
const SKIP_KERNEL: usize = 2;

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Stage {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: LayerSpec, out: usize, rng: &mut R) -> Result<Self> {
        Ok(Stage {
            conv: Conv2d::new(store, name, spec, true, Init::HeUniform, true, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out),
        })
    }

    /// conv → BN → ReLU
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }
}

/// One of the four block projections `p1..p4`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub index: usize,
    stages: Vec<Stage>,
    upsample_after_first: bool,
    dense: Stage,
    carry: Vec<Conv2d>,
    combine: Combine,
}

impl Projection {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &DecoderConfig,
        index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        let cin = cfg.block_channels();
        let name = format!("decoder.p{}", index + 1);
        let down = |i: usize| LayerSpec::Downsample2x {
            in_channels: i,
            out_channels: c,
            kernel: DOWN_KERNEL,
        };
        // Resampling per level: p1 ×2, p2 none, p3 ÷2, p4 ÷4.
        let specs = match index {
            0 | 1 => [LayerSpec::conv3x3(cin, c), LayerSpec::conv3x3(c, c), LayerSpec::conv3x3(c, c)],
            2 => [down(cin), LayerSpec::conv3x3(c, c), LayerSpec::conv3x3(c, c)],
            3 => [down(cin), down(c), LayerSpec::conv3x3(c, c)],
            _ => return Err(Error::Config(format!("projection index {index} out of range"))),
        };
        let stages = specs
            .iter()
            .enumerate()
            .map(|(i, &s)| Stage::new(store, &format!("{name}.conv{}", i + 1), s, c, rng))
            .collect::<Result<Vec<_>>>()?;
        let dense = Stage::new(store, &format!("{name}.dense"), LayerSpec::conv3x3(c, c), c, rng)?;
        let skip_down = |store: &mut ParamStore<T>, k: usize, rng: &mut R| {
            Conv2d::new(
                store,
                &format!("{name}.skip{k}"),
                LayerSpec::Downsample2x {
                    in_channels: c,
                    out_channels: c,
                    kernel: SKIP_KERNEL,
                },
                false,
                Init::HeUniform,
                true,
                rng,
            )
        };
        let hops = match (cfg.skip, index) {
            (SkipMode::Chained, 1..=3) => 1,
            (SkipMode::Direct, 3) => 3,
            _ => 0,
        };
        let carry = (0..hops).map(|k| skip_down(store, k, rng)).collect::<Result<_>>()?;
        Ok(Projection {
            index,
            stages,
            upsample_after_first: index == 0,
            dense,
            carry,
            combine: cfg.combine,
        })
    }

    pub fn takes_carry(&self) -> bool {
        !self.carry.is_empty()
    }

    /// Projects one block (three `[N, D, S, S]` maps). `carry` is the output
    /// of the level feeding this one's skip connection, at its own resolution.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        block: [Var; 3],
        carry: Option<Var>,
    ) -> Result<Var> {
        let shape = tape.value(block[0]).shape().to_vec();
        if block.iter().any(|&b| tape.value(b).shape() != shape) {
            return Err(Error::shape(
                "projection",
                format!(
                    "block maps differ: {:?}, {:?}, {:?}",
                    tape.value(block[0]).shape(),
                    tape.value(block[1]).shape(),
                    tape.value(block[2]).shape()
                ),
            ));
        }
        let mut x = match self.combine {
            Combine::Concat => tape.concat_channels(&block)?,
            Combine::Sum => {
                let s = tape.add(block[0], block[1])?;
                tape.add(s, block[2])?
            }
        };
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(tape, store, x)?;
            if i == 0 && self.upsample_after_first {
                x = tape.upsample2x(x)?;
            }
        }
        // Dense stage: conv → ReLU → BN.
        let y = self.dense.conv.forward(tape, store, x)?;
        let y = tape.relu(y);
        let mut out = self.dense.bn.forward(tape, store, y)?;
        if let (Some(mut c), true) = (carry, self.takes_carry()) {
            for conv in &self.carry {
                c = conv.forward(tape, store, c)?;
            }
            out = tape.add(out, c)?;
        }
        Ok(out)
    }
}

/// `p5`/`p6`: stride-2 conv + BN + ReLU.
#[derive(Debug, Clone)]
pub struct Extension {
    stage: Stage,
}

#[derive(Debug, Clone)]
pub struct PyramidDecoder {
    pub config: DecoderConfig,
    pub projections: Vec<Projection>,
    pub extensions: Vec<Extension>,
    skips_enabled: bool,
}

/// Six pyramid levels `[N, C, s_j, s_j]` on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PyramidVars(pub [Var; 6]);

/// Materialized pyramid for one image: six `[C, s_j, s_j]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn spatial_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.shape()[1]).collect()
    }
}

impl PyramidDecoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let projections = (0..4)
            .map(|j| Projection::new(store, &config, j, rng))
            .collect::<Result<_>>()?;
        let extensions = (5..=6)
            .map(|j| {
                let spec = LayerSpec::Downsample2x {
                    in_channels: config.channels,
                    out_channels: config.channels,
                    kernel: DOWN_KERNEL,
                };
                Stage::new(store, &format!("decoder.p{j}"), spec, config.channels, rng).map(|stage| Extension { stage })
            })
            .collect::<Result<_>>()?;
        Ok(PyramidDecoder {
            config,
            projections,
            extensions,
            skips_enabled: true,
        })
    }

    /// Ablation hook: with skips disabled the carry inputs are dropped while
    /// every parameter stays in place.
    pub fn set_skips_enabled(&mut self, enabled: bool) {
        self.skips_enabled = enabled;
    }

    /// Expected `[N, D, S, S]` shape of each block map.
    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let c = &self.config;
        [batch, c.input_channels, c.base_size, c.base_size]
    }

    /// z5 = p5(z4), z6 = p6(z5).
    pub fn extend<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z4: Var) -> Result<(Var, Var)> {
        let [_, _, h, w] = tape.value(z4).dims4("extend_pyramid")?;
        if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "extend_pyramid",
                format!("z4 spatial size {h}x{w} must be a multiple of 4 and at least 4"),
            ));
        }
        let z5 = self.extensions[0].stage.forward(tape, store, z4)?;
        let z6 = self.extensions[1].stage.forward(tape, store, z5)?;
        Ok((z5, z6))
    }

    /// Runs p1..p4 with the configured skip wiring, then p5/p6.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, blocks: [[Var; 3]; 4]) -> Result<PyramidVars> {
        let batch = tape.value(blocks[0][0]).shape()[0];
        let expected = self.input_shape(batch);
        for (i, b) in blocks.iter().enumerate() {
            for (k, &v) in b.iter().enumerate() {
                if tape.value(v).shape() != expected {
                    return Err(Error::shape(
                        "decoder",
                        format!(
                            "block {i} map {k} has shape {:?}, expected {expected:?}",
                            tape.value(v).shape()
                        ),
                    ));
                }
            }
        }
        let mut z: Vec<Var> = Vec::with_capacity(6);
        for (j, p) in self.projections.iter().enumerate() {
            let carry = match self.config.skip {
                _ if !self.skips_enabled => None,
                SkipMode::Chained if j > 0 => Some(z[j - 1]),
                SkipMode::Direct if j == 3 => Some(z[0]),
                _ => None,
            };
            z.push(p.forward(tape, store, blocks[j], carry)?);
        }
        let (z5, z6) = self.extend(tape, store, z[3])?;
        Ok(PyramidVars([z[0], z[1], z[2], z[3], z5, z6]))
    }

    /// Eval-mode forward for a single image's blocks (`[D, S, S]` maps).
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, blocks: [[&Tensor<T>; 3]; 4]) -> Result<FeaturePyramid<T>> {
        let mut tape = Tape::new(false);
        let mut vars = [[None; 3]; 4];
        for (i, b) in blocks.iter().enumerate() {
            for (k, t) in b.iter().enumerate() {
                let [d, h, w] = t.dims3("decoder")?;
                vars[i][k] = Some(tape.input((*t).clone().reshape(&[1, d, h, w])?));
            }
        }
        let vars = vars.map(|b| b.map(|v| v.expect("filled")));
        let out = self.forward(&mut tape, store, vars)?;
        let levels = out.0.iter().map(|&v| tape.value(v).index0(0)).collect();
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(skip: SkipMode) -> DecoderConfig {
        DecoderConfig {
            channels: 4,
            input_channels: 2,
            base_size: 16,
            combine: Combine::Concat,
            skip,
        }
    }

    fn blocks(tape: &mut Tape<f64>, cfg: &DecoderConfig, n: usize, seed: u64) -> [[Var; 3]; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [n, cfg.input_channels, cfg.base_size, cfg.base_size];
        [[(); 3]; 4].map(|b| b.map(|_| tape.input(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)))))
    }

    #[test]
    fn level_sizes_follow_geometric_chain() {
        let cfg = tiny(SkipMode::Chained);
        let mut store = ParamStore::<f64>::new();
        let dec = PyramidDecoder::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new(true);
        let b = blocks(&mut tape, &cfg, 2, 1);
        let z = dec.forward(&mut tape, &store, b).unwrap();
        let sizes: Vec<Vec<usize>> = z.0.iter().map(|&v| tape.value(v).shape().to_vec()).collect();
        let expect: Vec<Vec<usize>> = [32, 16, 8, 4, 2, 1].iter().map(|&s| vec![2, 4, s, s]).collect();
        assert_eq!(sizes, expect);
        assert!(store.params().all(|(_, p)| p.trainable));
    }

    #[test]
    fn extension_rejects_small_z4() {
        let cfg = tiny(SkipMode::Chained);
        let mut store = ParamStore::<f64>::new();
        let dec = PyramidDecoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new(false);
        let z4 = tape.input(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(dec.extend(&mut tape, &store, z4).is_err());
        let z4 = tape.input(Tensor::zeros(&[1, 4, 16, 16]));
        let (z5, z6) = dec.extend(&mut tape, &store, z4).unwrap();
        assert_eq!(tape.value(z5).shape(), &[1, 4, 8, 8]);
        assert_eq!(tape.value(z6).shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn zero_carry_matches_no_carry() {
        let cfg = tiny(SkipMode::Chained);
        let mut store = ParamStore::<f64>::new();
        let dec = PyramidDecoder::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new(false);
        let b = blocks(&mut tape, &cfg, 1, 3);
        let zero = tape.input(Tensor::zeros(&[1, 4, 32, 32]));
        let p2 = &dec.projections[1];
        let with = p2.forward(&mut tape, &store, b[1], Some(zero)).unwrap();
        let without = p2.forward(&mut tape, &store, b[1], None).unwrap();
        assert_eq!(tape.value(with), tape.value(without));
    }

    #[test]
    fn mismatched_block_rejected() {
        let cfg = tiny(SkipMode::Chained);
        let mut store = ParamStore::<f64>::new();
        let dec = PyramidDecoder::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new(false);
        let mut b = blocks(&mut tape, &cfg, 1, 3);
        b[2][1] = tape.input(Tensor::zeros(&[1, 2, 8, 8]));
        assert!(dec.projections[2].forward(&mut tape, &store, b[2], None).is_err());
        assert!(dec.forward(&mut tape, &store, b).is_err());
    }

    #[test]
    fn all_zero_blocks_give_zero_pyramid_in_eval() {
        let cfg = tiny(SkipMode::Chained);
        let mut store = ParamStore::<f32>::new();
        let dec = PyramidDecoder::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let zero = Tensor::zeros(&[2, 16, 16]);
        let refs = [[&zero; 3]; 4];
        let pyr = dec.infer(&store, refs).unwrap();
        assert_eq!(pyr.spatial_sizes(), vec![32, 16, 8, 4, 2, 1]);
        for l in &pyr.levels {
            assert!(l.data().iter().all(|v| v.abs() <= 1e-6));
        }
    }

    #[test]
    fn removing_skips_changes_outputs() {
        for mode in [SkipMode::Chained, SkipMode::Direct] {
            let cfg = tiny(mode);
            let mut store = ParamStore::<f64>::new();
            let mut dec = PyramidDecoder::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let mut tape = Tape::new(true);
            let b = blocks(&mut tape, &cfg, 2, 5);
            let with = dec.forward(&mut tape, &store, b).unwrap();
            dec.set_skips_enabled(false);
            let without = dec.forward(&mut tape, &store, b).unwrap();
            assert_eq!(tape.value(with.0[0]), tape.value(without.0[0]));
            assert!(tape.value(with.0[3]).max_abs_diff(tape.value(without.0[3])) > 1e-6);
        }
    }
}
