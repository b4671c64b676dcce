//! The full network: stream embeddings, backbone tail with adapter, fusion,
//! explicit features and the classifier head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::classifier::{ClassifierHead, HeadOutput};
use crate::config::RunConfig;
use crate::data::{StreamTensors, NUM_CLASSES};
use crate::embedding::{AdapterBlock, AdapterScope, StreamEmbedder, StreamId};
use crate::error::{Error, Result};
use crate::features::{FeatureScaler, FeatureVector, FEATURE_DIM};
use crate::fusion::{EmbeddedStreams, Fusion};
use crate::par::{self, Parallelism};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::tensor_io::{load_named, save_named};

/// Checkpoint entry holding the feature scaler.
pub const SCALER_ENTRY: &str = "features.scaler";

/// Input widths of the two stream kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputDims {
    pub text: usize,
    pub image: usize,
}

impl InputDims {
    pub fn of(sample: &StreamTensors) -> Self {
        InputDims { text: sample.claim_text.dims()[1], image: sample.claim_image.dims()[1] }
    }
}

/// One sample's inputs to the network.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub streams: &'a StreamTensors,
    pub features: &'a FeatureVector,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub store: ParamStore<T>,
    pub cfg: RunConfig,
    pub dims: InputDims,
    /// In [`crate::fusion::STREAM_ORDER`] restricted to the layout.
    pub embedders: Vec<StreamEmbedder>,
    pub image_tail: Option<AdapterBlock>,
    pub text_tail: Option<AdapterBlock>,
    pub fusion: Fusion,
    pub head: ClassifierHead,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig, dims: InputDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = cfg.layout;
        let uses_images = layout.streams().iter().any(|s| s.is_image());
        let image_tail = uses_images.then(|| AdapterBlock::new(&mut store, &mut rng, "ffn", "adapter", dims.image));
        let text_tail = cfg.adapter_on_text.then(|| AdapterBlock::new(&mut store, &mut rng, "text_ffn", "text_adapter", dims.text));
        let embedders = layout
            .streams()
            .iter()
            .map(|&s| {
                let bd = if s.is_image() { dims.image } else { dims.text };
                StreamEmbedder::new(&mut store, &mut rng, s, bd, cfg.d)
            })
            .collect();
        let fusion = Fusion::new(&mut store, &mut rng, cfg.co_attention(), layout, cfg.aggregation)?;
        let in_dim = fusion.output_width() + if cfg.use_features { FEATURE_DIM } else { 0 };
        let head = ClassifierHead::new(&mut store, &mut rng, in_dim, cfg.d_m);
        let mut model = Model { store, cfg: cfg.clone(), dims, embedders, image_tail, text_tail, fusion, head };
        model.apply_scope(cfg.adapter_scope);
        Ok(model)
    }

    pub fn apply_scope(&mut self, scope: AdapterScope) {
        self.cfg.adapter_scope = scope;
        for tail in self.image_tail.iter().chain(&self.text_tail) {
            tail.apply_scope(&mut self.store, scope);
        }
    }

    pub fn input_width(&self) -> usize {
        self.head.in_dim
    }

    fn stream_input(&self, g: &mut Graph<T>, id: StreamId, t: &Tensor<f32>) -> Result<Var> {
        let x = g.constant(t.cast());
        let tail = if id.is_image() { self.image_tail.as_ref() } else { self.text_tail.as_ref() };
        match tail {
            Some(tail) => tail.forward(g, &self.store, x, self.cfg.adapter_scope),
            None => Ok(x),
        }
    }

    /// The classifier input of one sample, `[1 x input_width]`.
    pub fn sample_vector(&self, g: &mut Graph<T>, sample: SampleRef<'_>) -> Result<Var> {
        let mut streams = EmbeddedStreams::default();
        for emb in &self.embedders {
            let t = match emb.stream {
                StreamId::ClaimText => &sample.streams.claim_text,
                StreamId::DocText => &sample.streams.doc_text,
                StreamId::ClaimImage => &sample.streams.claim_image,
                StreamId::DocImage => &sample.streams.doc_image,
            };
            let x = self.stream_input(g, emb.stream, t)?;
            let e = emb.forward(g, &self.store, x)?;
            match emb.stream {
                StreamId::ClaimText => streams.claim_text = Some(e),
                StreamId::DocText => streams.doc_text = Some(e),
                StreamId::ClaimImage => streams.claim_image = Some(e),
                StreamId::DocImage => streams.doc_image = Some(e),
            }
        }
        let fused = self.fusion.fuse(g, &self.store, &streams)?;
        let mut v = fused.concat(g)?;
        if self.cfg.use_features {
            let f = Tensor::new(&[FEATURE_DIM], sample.features.0.iter().map(|&x| T::of(x)).collect())?;
            let f = g.constant(f);
            v = g.concat(&[v, f], 0)?;
        }
        let w = self.input_width();
        g.reshape(v, &[1, w])
    }

    /// Head outputs for a batch, one row per sample.
    pub fn forward(&self, g: &mut Graph<T>, batch: &[SampleRef<'_>]) -> Result<HeadOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        let rows = batch.iter().map(|s| self.sample_vector(g, *s)).collect::<Result<Vec<_>>>()?;
        let o = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        self.head.forward(g, &self.store, o)
    }

    /// Eval-mode probabilities; samples are processed independently, possibly
    /// in parallel, and returned in input order.
    pub fn predict(&self, samples: &[SampleRef<'_>], mode: Parallelism) -> Result<Vec<[f64; NUM_CLASSES]>>
    where
        T: Send + Sync,
    {
        par::map(mode, samples, |s| {
            let mut g = Graph::new();
            let out = self.forward(&mut g, std::slice::from_ref(s))?;
            let p = g.value(out.probs).data();
            let mut row = [0.0; NUM_CLASSES];
            for (r, v) in row.iter_mut().zip(p) {
                *r = v.as_f64();
            }
            Ok(row)
        })
        .into_iter()
        .collect()
    }

    /// Copies the model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            store: self.store.cast(),
            cfg: self.cfg.clone(),
            dims: self.dims,
            embedders: self.embedders.clone(),
            image_tail: self.image_tail.clone(),
            text_tail: self.text_tail.clone(),
            fusion: self.fusion.clone(),
            head: self.head.clone(),
        }
    }

    /// Writes every parameter and the feature scaler as a named collection.
    pub fn save_checkpoint(&self, path: &Path, scaler: &FeatureScaler) -> Result<()> {
        let mut entries = self.store.named_tensors();
        entries.push((SCALER_ENTRY.to_string(), scaler.to_tensor()));
        save_named(path, &entries)
    }

    /// Builds a model for `cfg` and fills it from a checkpoint.
    pub fn load_checkpoint(path: &Path, cfg: &RunConfig, dims: InputDims) -> Result<(Self, FeatureScaler)> {
        let mut entries = load_named(path)?;
        let pos = entries
            .iter()
            .position(|(n, _)| n == SCALER_ENTRY)
            .ok_or_else(|| Error::Format(format!("checkpoint {} has no {SCALER_ENTRY} entry", path.display())))?;
        let (_, scaler) = entries.remove(pos);
        let scaler = FeatureScaler::from_tensor(&scaler)?;
        let mut model = Model::new(cfg, dims, cfg.seed)?;
        model.store.load_named(&entries)?;
        Ok((model, scaler))
    }
}
