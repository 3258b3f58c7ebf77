//! Parameter storage and the few layer types the models are built from.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Named, ordered model parameters.
///
/// Every store carries a process-unique tag so that parameters of several
/// stores can share one tape without their gradients being mixed up.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    tag: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("parameter {} missing from checkpoint", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// `y = x W + b` over the last axis; `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(&[d_in, d_out], d_in, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let shape = g.shape(x).to_vec();
        let d_in = *shape.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = shape.iter().product::<usize>() / d_in.max(1);
        let flat = g.reshape(x, &[rows, d_in])?;
        let y = g.matmul(flat, w)?;
        let y = g.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = g.shape(w)[1];
        g.reshape(y, &out_shape)
    }
}

/// 2-D convolution layer with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed 2-D convolution layer with bias; weights `[Cin, Cout, k, k]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(&[cin, cout, kernel, kernel], cout * kernel * kernel / (stride * stride).max(1), rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Layer normalisation over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}
