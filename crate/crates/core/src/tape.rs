//! Reverse-mode differentiation over a recorded tape of layer primitives.
//!
//! Parameters live in a [`ParamStore`]; a [`Tape`] copies the values it
//! reads, records every primitive applied, and `backward` produces
//! gradients keyed by [`ParamId`]. Frozen parameters never receive one.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BnBatchStats, BnCache, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter {
            value,
            gradient,
            trainable,
        }
    }
}

/// Named parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.params.push(Parameter::new(value, trainable));
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(value);
        self.buffer_names.push(name.into());
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffer_names.iter().map(String::as_str).zip(&self.buffers)
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.buffer_names.iter().map(String::as_str).zip(self.buffers.iter_mut())
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(T::zero());
        }
    }

    /// Adds tape gradients into the stored ones. Frozen parameters are skipped,
    /// so their gradient stays identically zero.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in &grads.by_param {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.gradient.add_assign(g);
            }
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Casts every parameter and buffer to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.value.cast(), p.trainable))
                .collect(),
            names: self.names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
        }
    }

    /// Applies running-statistics updates collected by a train-mode tape.
    pub fn commit(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f(BN_MOMENTUM);
        for u in updates {
            for (r, &b) in self.buffers[u.mean.0].data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in self.buffers[u.var.0]
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var_unbiased)
            {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BnBatchStats<T>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Relu(Var),
    Upsample(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    FlattenAnchors {
        inputs: Vec<Var>,
        per_anchor: usize,
    },
    /// Scalar whose gradient w.r.t. `input` was computed during the forward pass.
    Loss { input: Var, grad: Tensor<T> },
    Sum(Vec<Var>),
    Dot { x: Var, weights: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
    train: bool,
    kinks: Option<Vec<bool>>,
}

impl<T: Scalar> Tape<T> {
    /// `train` selects batch statistics in batch-norm layers.
    pub fn new(train: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            bn_updates: Vec::new(),
            train,
            kinks: None,
        }
    }

    /// Records the branch taken at every non-smooth point (ReLU sign,
    /// clamps, piecewise losses). Finite-difference checks compare traces to
    /// detect steps that straddle a kink.
    pub fn with_kink_trace(mut self) -> Self {
        self.kinks = Some(Vec::new());
        self
    }

    pub fn kink_trace(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    pub fn record_kinks(&mut self, bits: impl IntoIterator<Item = bool>) {
        if let Some(k) = self.kinks.as_mut() {
            k.extend(bits);
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a stored parameter; repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, rg))
    }

    pub fn batchnorm2d(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Result<Var> {
        let (y, cache, stats) = kernels::batchnorm2d(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            store.buffer(running_mean).data(),
            store.buffer(running_var).data(),
            self.train,
        )?;
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate {
                mean: running_mean,
                var: running_var,
                stats,
            });
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, cache }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = kernels::relu(xv);
        if self.kinks.is_some() {
            let bits: Vec<bool> = xv.data().iter().map(|&v| v > T::zero()).collect();
            self.record_kinks(bits);
        }
        let rg = self.needs(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample2x(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(y, Op::Upsample(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat_channels(&vals)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(y, Op::Concat(parts.to_vec()), rg))
    }

    /// Flattens per-level head maps `[N, anchors·per, h, w]` into
    /// `[N, Σ anchors·h·w, per]`, ordered level → row → column → anchor.
    pub fn flatten_anchors(&mut self, inputs: &[Var], per_anchor: usize) -> Result<Var> {
        let mut n0 = None;
        let mut total = 0;
        for &v in inputs {
            let [n, c, h, w] = self.value(v).dims4("flatten_anchors")?;
            if c % per_anchor != 0 {
                return Err(Error::shape(
                    "flatten_anchors",
                    format!("{c} channels not divisible by {per_anchor}"),
                ));
            }
            if *n0.get_or_insert(n) != n {
                return Err(Error::shape("flatten_anchors", "batch sizes differ"));
            }
            total += (c / per_anchor) * h * w;
        }
        let n = n0.ok_or_else(|| Error::shape("flatten_anchors", "no inputs"))?;
        let mut out = vec![T::zero(); n * total * per_anchor];
        let mut offset = 0;
        for &v in inputs {
            let t = self.value(v);
            let [_, c, h, w] = t.dims4("flatten_anchors")?;
            let a_count = c / per_anchor;
            let hw = h * w;
            for b in 0..n {
                let src = &t.data()[b * c * hw..(b + 1) * c * hw];
                let dst = &mut out[(b * total + offset) * per_anchor..];
                for a in 0..a_count {
                    for j in 0..per_anchor {
                        let plane = &src[(a * per_anchor + j) * hw..(a * per_anchor + j + 1) * hw];
                        for (cell, &val) in plane.iter().enumerate() {
                            dst[(cell * a_count + a) * per_anchor + j] = val;
                        }
                    }
                }
            }
            offset += a_count * hw;
        }
        let rg = inputs.iter().any(|&v| self.needs(v));
        let y = Tensor::new(&[n, total, per_anchor], out)?;
        Ok(self.push(
            y,
            Op::FlattenAnchors {
                inputs: inputs.to_vec(),
                per_anchor,
            },
            rg,
        ))
    }

    /// Scalar loss node with a precomputed gradient w.r.t. `input`.
    pub fn loss(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape("loss", "gradient shape differs from input"));
        }
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(value), Op::Loss { input, grad }, rg))
    }

    /// Sum of all elements of every listed node.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total: T = parts.iter().map(|&p| self.value(p).sum()).sum();
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::scalar(total), Op::Sum(parts.to_vec()), rg)
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(Error::shape("dot", "weight shape differs from input"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, rg))
    }

    /// Batch-norm running-statistics updates recorded in train mode.
    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut by_param = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, d: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => by_param.push((*id, g)),
                Op::Conv { x, w, b, stride, pad } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = cg.dx {
                        send(&mut grads, *x, dx);
                    }
                    send(&mut grads, *w, cg.dw);
                    if let Some(b) = b {
                        send(&mut grads, *b, cg.db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = kernels::batchnorm2d_backward(cache, self.value(*gamma), &g)?;
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gamma, dg);
                    send(&mut grads, *beta, db);
                }
                Op::Relu(x) => {
                    let dx = kernels::relu_backward(self.value(*x), &g);
                    send(&mut grads, *x, dx);
                }
                Op::Upsample(x) => {
                    send(&mut grads, *x, kernels::upsample2x_backward(&g)?);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let chans: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                    let split = kernels::concat_channels_backward(&g, &chans)?;
                    for (p, d) in parts.iter().zip(split) {
                        send(&mut grads, *p, d);
                    }
                }
                Op::FlattenAnchors { inputs, per_anchor } => {
                    let per = *per_anchor;
                    let [n, total, _] = g.shape()[..] else {
                        return Err(Error::shape("flatten_anchors_backward", "rank"));
                    };
                    let mut offset = 0;
                    for &v in inputs {
                        let shape = self.value(v).shape().to_vec();
                        let (c, hw) = (shape[1], shape[2] * shape[3]);
                        let a_count = c / per;
                        let mut d = vec![T::zero(); n * c * hw];
                        for b in 0..n {
                            let src = &g.data()[(b * total + offset) * per..];
                            let dst = &mut d[b * c * hw..(b + 1) * c * hw];
                            for a in 0..a_count {
                                for j in 0..per {
                                    let plane = &mut dst[(a * per + j) * hw..(a * per + j + 1) * hw];
                                    for (cell, val) in plane.iter_mut().enumerate() {
                                        *val = src[(cell * a_count + a) * per + j];
                                    }
                                }
                            }
                        }
                        offset += a_count * hw;
                        send(&mut grads, v, Tensor::new(&shape, d)?);
                    }
                }
                Op::Loss { input, grad } => {
                    let s = g.item();
                    send(&mut grads, *input, grad.map(|v| v * s));
                }
                Op::Sum(parts) => {
                    let s = g.item();
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        send(&mut grads, p, Tensor::full(&shape, s));
                    }
                }
                Op::Dot { x, weights } => {
                    let s = g.item();
                    send(&mut grads, *x, weights.map(|v| v * s));
                }
            }
        }
        by_param.sort_by_key(|(id, _)| *id);
        Ok(Gradients { by_param })
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_param: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|i| &self.by_param[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(i, t)| (*i, t))
    }
}
