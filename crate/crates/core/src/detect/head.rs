//! Classification and box-regression subnets shared across pyramid levels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{self, FocalParams};
use super::targets::BoxTargets;
use crate::decoder::PyramidVars;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init, LayerSpec};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const PRIOR_PROBABILITY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub anchors_per_cell: usize,
    pub depth: usize,
    pub levels: usize,
}

/// `−ln((1 − π) / π)`: initial classification bias giving foreground probability π.
pub fn prior_bias(pi: f64) -> f64 {
    -((1.0 - pi) / pi).ln()
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub config: HeadConfig,
    cls_tower: Vec<Conv2d>,
    cls_out: Conv2d,
    reg_tower: Vec<Conv2d>,
    reg_out: Conv2d,
}

/// Head outputs on a tape: logits `[N, A, K]`, deltas `[N, A, 4]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub logits: Var,
    pub deltas: Var,
}

impl DetectionHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: HeadConfig, rng: &mut R) -> Result<Self> {
        if config.num_classes == 0 || config.channels == 0 || config.anchors_per_cell == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let c = config.channels;
        let tower = |store: &mut ParamStore<T>, name: &str, rng: &mut R| {
            (0..config.depth)
                .map(|i| {
                    Conv2d::new(
                        store,
                        &format!("head.{name}.conv{i}"),
                        LayerSpec::conv3x3(c, c),
                        true,
                        Init::Normal(0.01f64.max((2.0 / (9.0 * c as f64)).sqrt())),
                        true,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let cls_tower = tower(store, "cls", rng)?;
        let cls_out = Conv2d::new(
            store,
            "head.cls.out",
            LayerSpec::conv3x3(c, config.anchors_per_cell * config.num_classes),
            true,
            Init::Normal(0.01),
            true,
            rng,
        )?;
        let bias = T::from_f(prior_bias(PRIOR_PROBABILITY));
        if let Some(b) = cls_out.bias {
            store.get_mut(b).value.data_mut().fill(bias);
        }
        let reg_tower = tower(store, "reg", rng)?;
        let reg_out = Conv2d::new(
            store,
            "head.reg.out",
            LayerSpec::conv3x3(c, config.anchors_per_cell * 4),
            true,
            Init::Normal(0.01),
            true,
            rng,
        )?;
        Ok(DetectionHead {
            config,
            cls_tower,
            cls_out,
            reg_tower,
            reg_out,
        })
    }

    fn subnet<T: Scalar>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tower: &[Conv2d],
        out: &Conv2d,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for conv in tower {
            let y = conv.forward(tape, store, h)?;
            h = tape.relu(y);
        }
        out.forward(tape, store, h)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, levels: &[Var]) -> Result<HeadVars> {
        if levels.len() != self.config.levels {
            return Err(Error::Config(format!(
                "head expects {} pyramid levels, got {}",
                self.config.levels,
                levels.len()
            )));
        }
        let mut cls = Vec::with_capacity(levels.len());
        let mut reg = Vec::with_capacity(levels.len());
        for &z in levels {
            cls.push(Self::subnet(tape, store, &self.cls_tower, &self.cls_out, z)?);
            reg.push(Self::subnet(tape, store, &self.reg_tower, &self.reg_out, z)?);
        }
        Ok(HeadVars {
            logits: tape.flatten_anchors(&cls, self.config.num_classes)?,
            deltas: tape.flatten_anchors(&reg, 4)?,
        })
    }

    pub fn forward_pyramid<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pyramid: &PyramidVars) -> Result<HeadVars> {
        self.forward(tape, store, &pyramid.0)
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub focal: f64,
    pub boxes: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.focal + self.boxes
    }
}

/// Focal + smooth-L1 over a batch; the sums are normalized by the batch's
/// total foreground count. Returns the scalar loss node.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head: HeadVars,
    targets: &[BoxTargets],
    focal: FocalParams,
) -> Result<(Var, LossBreakdown)> {
    let [n, a, k] = tape.value(head.logits).shape()[..] else {
        return Err(Error::shape("detection_loss", "logits must be rank 3"));
    };
    if targets.len() != n || targets.iter().any(|t| t.labels.len() != a) {
        return Err(Error::shape(
            "detection_loss",
            format!("{} target sets for batch {n} of {a} anchors", targets.len()),
        ));
    }
    let labels: Vec<i32> = targets.iter().flat_map(|t| t.labels.iter().copied()).collect();
    let deltas: Vec<[f32; 4]> = targets.iter().flat_map(|t| t.deltas.iter().copied()).collect();

    let f = loss::focal_loss(tape.value(head.logits).data(), &labels, k, focal);
    let b = loss::box_loss(tape.value(head.deltas).data(), &deltas, &labels, loss::SMOOTH_L1_BETA);
    tape.record_kinks(f.kinks.iter().copied().chain(b.kinks.iter().copied()));

    let lshape = tape.value(head.logits).shape().to_vec();
    let dshape = tape.value(head.deltas).shape().to_vec();
    let fv = tape.loss(head.logits, T::from_f(f.value), Tensor::new(&lshape, f.grad)?)?;
    let bv = tape.loss(head.deltas, T::from_f(b.value), Tensor::new(&dshape, b.grad)?)?;
    let total = tape.add(fv, bv)?;
    Ok((
        total,
        LossBreakdown {
            focal: f.value,
            boxes: b.value,
        },
    ))
}
