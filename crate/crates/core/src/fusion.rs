//! Six-pairing co-attention fusion over the four embedded streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::embedding::StreamId;
use crate::error::{Error, Result};
use crate::param::{glorot, ParamGroup, ParamId, ParamStore};
use crate::tensor::{s, Scalar, Tensor};

use StreamId::{ClaimImage as CI, ClaimText as CT, DocImage as DI, DocText as DT};

/// Pairing order of the fusion blocks. Slot `k` yields contexts `2k` (first
/// stream as query) and `2k + 1` (second stream as query).
pub const PAIRINGS: [(StreamId, StreamId); 6] = [(CI, DI), (CT, DT), (CI, DT), (CI, CT), (DI, CT), (DI, DT)];

/// Order of the aggregated raw streams after the contexts.
pub const STREAM_ORDER: [StreamId; 4] = [CT, CI, DT, DI];

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Mean, max and last position concatenated (width `3d`).
    MeanMaxLast,
}

impl Aggregation {
    pub fn width(self, d: usize) -> usize {
        match self {
            Aggregation::Mean => d,
            Aggregation::MeanMaxLast => 3 * d,
        }
    }
}

/// Which pairings and streams take part in fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLayout {
    #[default]
    Full,
    /// Only the claim-text/document-text pairing and the two text streams.
    TextOnly,
}

impl FusionLayout {
    /// Indices into [`PAIRINGS`].
    pub fn pairings(self) -> &'static [usize] {
        match self {
            FusionLayout::Full => &[0, 1, 2, 3, 4, 5],
            FusionLayout::TextOnly => &[1],
        }
    }

    pub fn streams(self) -> &'static [StreamId] {
        match self {
            FusionLayout::Full => &STREAM_ORDER,
            FusionLayout::TextOnly => &[CT, DT],
        }
    }

    pub fn uses(self, s: StreamId) -> bool {
        self.streams().contains(&s)
    }

    /// Number of aggregated vectors: contexts plus streams.
    pub fn outputs(self) -> usize {
        2 * self.pairings().len() + self.streams().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoAttentionConfig {
    pub d: usize,
    pub heads: usize,
    pub ff_inner: usize,
    pub dropout: f64,
    /// Scale scores by `1/sqrt(d)` instead of `1/sqrt(d/heads)`.
    pub scale_by_model_dim: bool,
}

impl CoAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if self.ff_inner == 0 {
            return Err(Error::Config("ff_inner must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn score_scale(&self) -> f64 {
        let denom = if self.scale_by_model_dim { self.d } else { self.head_dim() };
        1.0 / (denom as f64).sqrt()
    }
}

/// One directional pass: outputs and per-head attention weights.
#[derive(Debug, Clone)]
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct CoAttentionBlock {
    pub cfg: CoAttentionConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl CoAttentionBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, prefix: &str, cfg: CoAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d, cfg.ff_inner);
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t, ParamGroup::Primary);
        Ok(CoAttentionBlock {
            cfg,
            wq: add("Wq", glorot(rng, d, d)),
            wk: add("Wk", glorot(rng, d, d)),
            wv: add("Wv", glorot(rng, d, d)),
            ffn_w1: add("ffn.W1", glorot(rng, d, f)),
            ffn_b1: add("ffn.b1", Tensor::zeros(&[f])),
            ffn_w2: add("ffn.W2", glorot(rng, f, d)),
            ffn_b2: add("ffn.b2", Tensor::zeros(&[d])),
            norm1_gain: add("norm1.gain", Tensor::full(&[d], T::one())),
            norm1_bias: add("norm1.bias", Tensor::zeros(&[d])),
            norm2_gain: add("norm2.gain", Tensor::full(&[d], T::one())),
            norm2_bias: add("norm2.bias", Tensor::zeros(&[d])),
        })
    }

    fn check_width<T: Scalar>(&self, g: &Graph<T>, x: Var, side: &str) -> Result<usize> {
        let dims = g.value(x).dims();
        if dims.len() != 2 || dims[1] != self.cfg.d {
            return Err(Error::Shape(format!("co-attention input {side}: expected [len x {}], got {}", self.cfg.d, g.value(x).shape())));
        }
        Ok(dims[0])
    }

    /// Attention of projected queries over projected keys/values, with `q_in`
    /// as the residual. `key_bias`, when given, is added to the scores before
    /// the softmax.
    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        q_in: Var,
        proj_q: Var,
        proj_k: Var,
        proj_v: Var,
        key_bias: Option<Var>,
        p: &BoundParams,
    ) -> Result<Attended> {
        let dh = self.cfg.head_dim();
        let scale = s::<T>(self.cfg.score_scale());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (q, k, v) = if self.cfg.heads == 1 {
                (proj_q, proj_k, proj_v)
            } else {
                (g.narrow(proj_q, 1, h * dh, dh)?, g.narrow(proj_k, 1, h * dh, dh)?, g.narrow(proj_v, 1, h * dh, dh)?)
            };
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(bias) = key_bias {
                scores = g.add(scores, bias)?;
            }
            let w = g.softmax(scores, 1)?;
            weights.push(w);
            let w = g.dropout(w, self.cfg.dropout);
            heads.push(g.matmul(w, v)?);
        }
        let att = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };

        let z = g.add(q_in, att)?;
        let z = g.layer_norm(z, p.n1g, p.n1b, LN_EPS)?;
        let h = g.matmul(z, p.w1)?;
        let h = g.add_bias(h, p.b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.cfg.dropout);
        let f = g.matmul(h, p.w2)?;
        let f = g.add_bias(f, p.b2)?;
        let f = g.dropout(f, self.cfg.dropout);
        let o = g.add(f, z)?;
        let out = g.layer_norm(o, p.n2g, p.n2b, LN_EPS)?;
        Ok(Attended { out, weights })
    }

    fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BoundParams {
        BoundParams {
            wq: g.param(store, self.wq),
            wk: g.param(store, self.wk),
            wv: g.param(store, self.wv),
            w1: g.param(store, self.ffn_w1),
            b1: g.param(store, self.ffn_b1),
            w2: g.param(store, self.ffn_w2),
            b2: g.param(store, self.ffn_b2),
            n1g: g.param(store, self.norm1_gain),
            n1b: g.param(store, self.norm1_bias),
            n2g: g.param(store, self.norm2_gain),
            n2b: g.param(store, self.norm2_bias),
        }
    }

    /// Both directions with the same parameters: `(O_AB, O_BA)`.
    pub fn co_attend<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, a: Var, b: Var) -> Result<(Attended, Attended)> {
        self.check_width(g, a, "A")?;
        self.check_width(g, b, "B")?;
        self.run(g, store, a, b, None, None)
    }

    /// Co-attention over zero-padded inputs. Keys at positions `>= a_len`
    /// (resp. `b_len`) get `-inf` scores and therefore zero weight. Rows of
    /// the outputs beyond the true lengths are meaningless.
    pub fn co_attend_masked<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        a: Var,
        a_len: usize,
        b: Var,
        b_len: usize,
    ) -> Result<(Attended, Attended)> {
        let la = self.check_width(g, a, "A")?;
        let lb = self.check_width(g, b, "B")?;
        if a_len == 0 || a_len > la || b_len == 0 || b_len > lb {
            return Err(Error::Shape(format!("mask lengths {a_len}/{b_len} invalid for padded lengths {la}/{lb}")));
        }
        let mask_ab = g.constant(key_mask(la, lb, b_len));
        let mask_ba = g.constant(key_mask(lb, la, a_len));
        self.run(g, store, a, b, Some(mask_ab), Some(mask_ba))
    }

    fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        a: Var,
        b: Var,
        mask_ab: Option<Var>,
        mask_ba: Option<Var>,
    ) -> Result<(Attended, Attended)> {
        let p = self.bind(g, store);
        let qa = g.matmul(a, p.wq)?;
        let ka = g.matmul(a, p.wk)?;
        let va = g.matmul(a, p.wv)?;
        let qb = g.matmul(b, p.wq)?;
        let kb = g.matmul(b, p.wk)?;
        let vb = g.matmul(b, p.wv)?;
        let ab = self.attend(g, a, qa, kb, vb, mask_ab, &p)?;
        let ba = self.attend(g, b, qb, ka, va, mask_ba, &p)?;
        Ok((ab, ba))
    }
}

struct BoundParams {
    wq: Var,
    wk: Var,
    wv: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    n1g: Var,
    n1b: Var,
    n2g: Var,
    n2b: Var,
}

fn key_mask<T: Scalar>(rows: usize, cols: usize, valid: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in valid..cols {
            data[r * cols + c] = T::neg_infinity();
        }
    }
    Tensor::new(&[rows, cols], data).expect("mask dims are positive")
}

/// Pools a `[len x d]` sequence into a rank-1 vector.
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, x: Var, mode: Aggregation) -> Result<Var> {
    let mean = g.mean(x, 0)?;
    match mode {
        Aggregation::Mean => Ok(mean),
        Aggregation::MeanMaxLast => {
            let max = g.max(x, 0)?;
            let len = g.value(x).dims()[0];
            let last = g.narrow(x, 0, len - 1, 1)?;
            let d = g.value(x).dims()[1];
            let last = g.reshape(last, &[d])?;
            g.concat(&[mean, max, last], 0)
        }
    }
}

/// The four embedded streams of one sample, each `[len x d]`. Streams not
/// used by the layout may be `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddedStreams {
    pub claim_text: Option<Var>,
    pub claim_image: Option<Var>,
    pub doc_text: Option<Var>,
    pub doc_image: Option<Var>,
}

impl EmbeddedStreams {
    pub fn get(&self, id: StreamId) -> Option<Var> {
        match id {
            CT => self.claim_text,
            CI => self.claim_image,
            DT => self.doc_text,
            DI => self.doc_image,
        }
    }
}

/// Aggregated fusion outputs in slot order.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub contexts: Vec<Var>,
    pub streams: Vec<Var>,
    /// Per-head attention weights of each direction, in context order.
    pub attention: Vec<Vec<Var>>,
}

impl FusionOutput {
    /// `[contexts | streams]` as a single rank-1 vector.
    pub fn concat<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let parts: Vec<Var> = self.contexts.iter().chain(&self.streams).copied().collect();
        g.concat(&parts, 0)
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub layout: FusionLayout,
    pub aggregation: Aggregation,
    /// One block per entry of `layout.pairings()`.
    pub blocks: Vec<CoAttentionBlock>,
    pub cfg: CoAttentionConfig,
}

impl Fusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: CoAttentionConfig,
        layout: FusionLayout,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let blocks = layout
            .pairings()
            .iter()
            .map(|&k| CoAttentionBlock::new(store, rng, &format!("fusion.pair{}", k + 1), cfg))
            .collect::<Result<_>>()?;
        Ok(Fusion { layout, aggregation, blocks, cfg })
    }

    /// Width of [`FusionOutput::concat`].
    pub fn output_width(&self) -> usize {
        self.layout.outputs() * self.aggregation.width(self.cfg.d)
    }

    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, streams: &EmbeddedStreams) -> Result<FusionOutput> {
        let need = |id: StreamId| streams.get(id).ok_or_else(|| Error::Contract(format!("fusion layout needs stream {id}")));
        let mut contexts = Vec::with_capacity(2 * self.blocks.len());
        let mut attention = Vec::with_capacity(2 * self.blocks.len());
        for (blk, &k) in self.blocks.iter().zip(self.layout.pairings()) {
            let (sa, sb) = PAIRINGS[k];
            let (ab, ba) = blk.co_attend(g, store, need(sa)?, need(sb)?)?;
            for dir in [ab, ba] {
                contexts.push(aggregate(g, dir.out, self.aggregation)?);
                attention.push(dir.weights);
            }
        }
        let streams = self.layout.streams().iter().map(|&id| aggregate(g, need(id)?, self.aggregation)).collect::<Result<_>>()?;
        Ok(FusionOutput { contexts, streams, attention })
    }
}
