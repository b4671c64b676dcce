//! Per-stream embedding layers and the backbone tail with its adapter.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{glorot, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// One of the four input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamId {
    ClaimText,
    DocText,
    ClaimImage,
    DocImage,
}

impl StreamId {
    pub fn code(self) -> &'static str {
        match self {
            StreamId::ClaimText => "CT",
            StreamId::DocText => "DT",
            StreamId::ClaimImage => "CI",
            StreamId::DocImage => "DI",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, StreamId::ClaimImage | StreamId::DocImage)
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// `E = relu(X W + b)` applied per position.
#[derive(Debug, Clone)]
pub struct StreamEmbedder {
    pub stream: StreamId,
    pub w: ParamId,
    pub b: ParamId,
    pub backbone_dim: usize,
    pub d: usize,
}

impl StreamEmbedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, stream: StreamId, backbone_dim: usize, d: usize) -> Self {
        let w = store.add(format!("embed.{stream}.W"), glorot(rng, backbone_dim, d), ParamGroup::Primary);
        let b = store.add(format!("embed.{stream}.b"), Tensor::zeros(&[d]), ParamGroup::Primary);
        StreamEmbedder { stream, w, b, backbone_dim, d }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let dims = g.value(x).dims();
        if dims.len() != 2 || dims[1] != self.backbone_dim {
            return Err(Error::Shape(format!(
                "stream {}: expected [seq x {}] embeddings, got {}",
                self.stream,
                self.backbone_dim,
                g.value(x).shape()
            )));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        let pre = g.add_bias(xw, b)?;
        Ok(g.relu(pre))
    }
}

/// Which parts of the backbone tail train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterScope {
    /// No adapter branch; the tail is frozen.
    Frozen,
    /// Tail frozen, adapter trained.
    #[default]
    AdapterOnly,
    /// Tail and adapter both trained.
    All,
}

/// Stand-in for the last feed-forward layer of a pretrained backbone, with
/// a parallel adapter branch: `FFN(x) + (x W + b) + v`. The adapter starts
/// at zero, so an untrained block computes `FFN(x)`.
#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub adapter_w: ParamId,
    pub adapter_b: ParamId,
    pub adapter_v: ParamId,
    pub dim: usize,
    pub inner: usize,
}

impl AdapterBlock {
    /// Parameters are named `{ffn_prefix}.{W1|b1|W2|b2}` and
    /// `{adapter_prefix}.{W|b|v}`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, ffn_prefix: &str, adapter_prefix: &str, dim: usize) -> Self {
        let inner = (2 * dim).min(512);
        let grp = ParamGroup::Backbone;
        AdapterBlock {
            ffn_w1: store.add(format!("{ffn_prefix}.W1"), glorot(rng, dim, inner), grp),
            ffn_b1: store.add(format!("{ffn_prefix}.b1"), Tensor::zeros(&[inner]), grp),
            ffn_w2: store.add(format!("{ffn_prefix}.W2"), glorot(rng, inner, dim), grp),
            ffn_b2: store.add(format!("{ffn_prefix}.b2"), Tensor::zeros(&[dim]), grp),
            adapter_w: store.add(format!("{adapter_prefix}.W"), Tensor::zeros(&[dim, dim]), grp),
            adapter_b: store.add(format!("{adapter_prefix}.b"), Tensor::zeros(&[dim]), grp),
            adapter_v: store.add(format!("{adapter_prefix}.v"), Tensor::zeros(&[dim]), grp),
            dim,
            inner,
        }
    }

    fn host_params(&self) -> [ParamId; 4] {
        [self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2]
    }

    fn adapter_params(&self) -> [ParamId; 3] {
        [self.adapter_w, self.adapter_b, self.adapter_v]
    }

    pub fn apply_scope<T: Scalar>(&self, store: &mut ParamStore<T>, scope: AdapterScope) {
        for id in self.host_params() {
            store.set_trainable(id, scope == AdapterScope::All);
        }
        for id in self.adapter_params() {
            store.set_trainable(id, scope != AdapterScope::Frozen);
        }
    }

    /// Number of adapter weights: `dim² + 2·dim`.
    pub fn adapter_param_count(&self) -> usize {
        self.dim * self.dim + 2 * self.dim
    }

    pub fn trainable_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.host_params()
            .into_iter()
            .chain(self.adapter_params())
            .map(|id| store.get(id))
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn host_param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.host_params().into_iter().map(|id| store.get(id).value.numel()).sum()
    }

    pub fn ffn<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) =
            (g.param(store, self.ffn_w1), g.param(store, self.ffn_b1), g.param(store, self.ffn_w2), g.param(store, self.ffn_b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_bias(o, b2)
    }

    pub fn adapter<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b, v) = (g.param(store, self.adapter_w), g.param(store, self.adapter_b), g.param(store, self.adapter_v));
        let xw = g.matmul(x, w)?;
        let xb = g.add_bias(xw, b)?;
        g.add_bias(xb, v)
    }

    /// `FFN(x) + Adapter(x)`, or `FFN(x)` alone under [`AdapterScope::Frozen`].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, scope: AdapterScope) -> Result<Var> {
        let dims = g.value(x).dims();
        if dims.len() != 2 || dims[1] != self.dim {
            return Err(Error::Shape(format!("backbone tail expects [seq x {}], got {}", self.dim, g.value(x).shape())));
        }
        let f = self.ffn(g, store, x)?;
        if scope == AdapterScope::Frozen {
            return Ok(f);
        }
        let a = self.adapter(g, store, x)?;
        g.add(f, a)
    }
}
