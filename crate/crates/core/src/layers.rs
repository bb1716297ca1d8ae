//! Parameterized layers built on the tape primitives.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::kernels::conv_extent;
use crate::tape::{BufferId, ParamId, ParamStore, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Layer vocabulary with shape algebra that runs before any data is touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    Upsample2x,
    /// Learnable stride-2 convolution.
    Downsample2x {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Add,
    Linear1x1 {
        in_channels: usize,
        out_channels: usize,
    },
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    /// Output shape for an `[N, C, H, W]` input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [n, c, h, w] = input[..] else {
            return Err(Error::shape("layer", format!("expected rank 4, got {input:?}")));
        };
        let check_c = |expected: usize| {
            if c == expected {
                Ok(())
            } else {
                Err(Error::shape(
                    "layer",
                    format!("{self:?} expects {expected} channels, got {c}"),
                ))
            }
        };
        let conv = |cin: usize, cout: usize, k: usize, s: usize, p: usize| -> Result<Vec<usize>> {
            check_c(cin)?;
            match (conv_extent(h, k, s, p), conv_extent(w, k, s, p)) {
                (Some(ho), Some(wo)) => Ok(vec![n, cout, ho, wo]),
                _ => Err(Error::shape(
                    "layer",
                    format!("{self:?} has no exact output extent for {h}x{w}"),
                )),
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => conv(in_channels, out_channels, kernel, stride, padding),
            LayerSpec::Downsample2x {
                in_channels,
                out_channels,
                kernel,
            } => conv(in_channels, out_channels, kernel, 2, downsample_padding(kernel)?),
            LayerSpec::Linear1x1 {
                in_channels,
                out_channels,
            } => conv(in_channels, out_channels, 1, 1, 0),
            LayerSpec::BatchNorm2d { channels } => {
                check_c(channels)?;
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Add => Ok(input.to_vec()),
            LayerSpec::Upsample2x => Ok(vec![n, c, 2 * h, 2 * w]),
        }
    }
}

/// Padding that makes a stride-2 convolution exactly halve even extents.
fn downsample_padding(kernel: usize) -> Result<usize> {
    if kernel % 2 == 0 && kernel >= 2 {
        Ok(kernel / 2 - 1)
    } else {
        Err(Error::Config(format!(
            "stride-2 kernel must be even to halve even extents exactly, got {kernel}"
        )))
    }
}

pub enum Init {
    HeUniform,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: LayerSpec,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: LayerSpec,
        bias: bool,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (cin, cout, k, stride, padding) = match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => (in_channels, out_channels, kernel, stride, padding),
            LayerSpec::Downsample2x {
                in_channels,
                out_channels,
                kernel,
            } => (in_channels, out_channels, kernel, 2, downsample_padding(kernel)?),
            LayerSpec::Linear1x1 {
                in_channels,
                out_channels,
            } => (in_channels, out_channels, 1, 1, 0),
            other => return Err(Error::Config(format!("{other:?} is not a convolution"))),
        };
        let fan_in = (cin * k * k) as f64;
        let shape = [cout, cin, k, k];
        let weight = match init {
            Init::HeUniform => {
                let bound = (6.0 / fan_in).sqrt();
                let dist = Uniform::new(-bound, bound).expect("bound > 0");
                Tensor::from_fn(&shape, |_| T::from_f(dist.sample(rng)))
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("std > 0");
                Tensor::from_fn(&shape, |_| T::from_f(dist.sample(rng)))
            }
        };
        let weight = store.add(format!("{name}.weight"), weight, trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), trainable));
        Ok(Conv2d {
            weight,
            bias,
            spec,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    /// Plain forward without recording, for frozen feature extractors.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::kernels::conv2d(
            x,
            &store.get(self.weight).value,
            self.bias.map(|b| &store.get(b).value),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batchnorm2d(store, x, g, b, self.running_mean, self.running_var)
    }
}
