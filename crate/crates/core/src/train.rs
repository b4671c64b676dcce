//! Mini-batch training, evaluation and checkpoint selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::classifier::total_loss;
use crate::config::RunConfig;
use crate::data::{ingest_all, DatasetManifest, IngestOptions, RawSample, StreamTensors};
use crate::ensemble::ProbMatrix;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureScaler, FeatureVector};
use crate::metrics::{confusion, weighted_f1, ConfusionMatrix, F1Report};
use crate::model::{InputDims, Model, SampleRef};
use crate::optim::{AdamConfig, OptimizerState};
use crate::par::Parallelism;

/// A split with embeddings, scaled features and labels resolved.
#[derive(Debug, Clone)]
pub struct Split {
    pub records: Vec<RawSample>,
    pub streams: Vec<StreamTensors>,
    pub features: Vec<FeatureVector>,
    /// Empty when the split is unlabeled.
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(records: Vec<RawSample>, streams: Vec<StreamTensors>, extractor: &FeatureExtractor, mode: Parallelism) -> Result<Self> {
        if records.len() != streams.len() {
            return Err(Error::Shape(format!("{} records for {} stream sets", records.len(), streams.len())));
        }
        let features = extractor.extract_batch(&records, mode);
        let labels = if records.iter().all(|r| r.label.is_some()) {
            records.iter().map(|r| r.label.expect("checked").index()).collect()
        } else {
            Vec::new()
        };
        Ok(Split { records, streams, features, labels })
    }

    pub fn load(manifest: &DatasetManifest, cfg: &RunConfig, extractor: &FeatureExtractor, mode: Parallelism) -> Result<Self> {
        let opts = IngestOptions { max_seq_len: cfg.max_seq_len, fallback_text_dim: cfg.fallback_text_dim };
        let streams = ingest_all(manifest, opts, mode)?;
        Split::new(manifest.records.clone(), streams, extractor, mode)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.labels.len() == self.records.len()
    }

    pub fn sample(&self, i: usize) -> SampleRef<'_> {
        SampleRef { streams: &self.streams[i], features: &self.features[i] }
    }

    pub fn samples(&self) -> Vec<SampleRef<'_>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn dims(&self) -> Result<InputDims> {
        self.streams.first().map(InputDims::of).ok_or_else(|| Error::Contract("empty split".into()))
    }

    fn max_len(&self, i: usize) -> usize {
        let s = &self.streams[i];
        [&s.claim_text, &s.claim_image, &s.doc_text, &s.doc_image].iter().map(|t| t.dims()[0]).max().unwrap_or(0)
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supcon: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub parallelism: Parallelism,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { parallelism: Parallelism::default() }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub scaler: FeatureScaler,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    /// Validation probabilities of the best model.
    pub val_probs: ProbMatrix,
}

/// Batches of sample indices: sorted by longest stream, chunked, and the
/// chunk order shuffled per epoch. A trailing singleton joins the previous
/// chunk so every batch has at least two samples.
pub fn make_batches(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        let tail = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("non-empty").extend(tail);
    }
    chunks
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Eval-mode probabilities of `model` on `split`.
pub fn predict_split(model: &Model, split: &Split, model_id: &str, mode: Parallelism) -> Result<ProbMatrix> {
    let rows = model.predict(&split.samples(), mode)?;
    ProbMatrix::new(model_id, split.sample_ids(), rows)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub probs: ProbMatrix,
    pub confusion: Option<ConfusionMatrix>,
    pub f1: Option<F1Report>,
}

pub fn evaluate(model: &Model, split: &Split, model_id: &str, mode: Parallelism) -> Result<Evaluation> {
    let probs = predict_split(model, split, model_id, mode)?;
    if !split.is_labeled() {
        return Ok(Evaluation { probs, confusion: None, f1: None });
    }
    let cm = confusion(&probs.predictions(), &split.labels)?;
    let f1 = weighted_f1(&cm)?;
    Ok(Evaluation { probs, confusion: Some(cm), f1: Some(f1) })
}

/// Trains from scratch. Step records are written to `log` as JSON lines
/// when given. The returned model carries the parameters of the epoch with
/// the best validation F1 (earliest on ties).
pub fn train(
    cfg: &RunConfig,
    train: &Split,
    val: &Split,
    scaler: FeatureScaler,
    opts: TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !train.is_labeled() || !val.is_labeled() {
        return Err(Error::Contract("training and validation splits must be labeled".into()));
    }
    let mut model = Model::<f32>::new(cfg, train.dims()?, cfg.seed)?;
    let mut adam = AdamConfig::new(cfg.learning_rate);
    adam.backbone_learning_rate = cfg.backbone_learning_rate;
    let mut optim = OptimizerState::new(adam, &model.store)?;
    let loss_cfg = cfg.loss();

    let lengths: Vec<usize> = (0..train.len()).map(|i| train.max_len(i)).collect();
    let mut batches = make_batches(&lengths, cfg.batch_size);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));

    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::param::ParamStore<f32>)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        batches.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in &batches {
            step += 1;
            let samples: Vec<SampleRef<'_>> = batch.iter().map(|&i| train.sample(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::<f32>::training(mix(cfg.seed, epoch as u64, step as u64));
            let out = model.forward(&mut g, &samples)?;
            let parts = total_loss(&mut g, out, &labels, &loss_cfg)?;
            let rec = StepLog {
                epoch,
                step,
                ce: g.value(parts.ce).item() as f64,
                supcon: parts.supcon.map(|v| g.value(v).item() as f64),
                total: g.value(parts.total).item() as f64,
            };
            if !rec.total.is_finite() || !rec.ce.is_finite() || rec.supcon.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step, ce: rec.ce, supcon: rec.supcon.unwrap_or(0.0), total: rec.total });
            }
            g.backward(parts.total)?;
            model.store.zero_grad();
            g.accumulate_into(&mut model.store);
            optim.step(&mut model.store)?;
            loss_sum += rec.total;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<training log>"), e))?;
            }
            steps.push(rec);
        }
        let eval = evaluate(&model, val, "val", opts.parallelism)?;
        let val_f1 = eval.f1.expect("labeled").weighted;
        epochs.push(EpochLog { epoch, mean_loss: loss_sum / batches.len() as f64, val_f1 });
        if best.as_ref().is_none_or(|(f, _, _)| val_f1 > *f) {
            best = Some((val_f1, epoch, model.store.clone()));
        }
    }
    let (best_f1, best_epoch) = match best {
        Some((f1, epoch, store)) => {
            model.store = store;
            (f1, epoch)
        }
        None => (0.0, 0),
    };
    let val_probs = predict_split(&model, val, &format!("seed{}", cfg.seed), opts.parallelism)?;
    Ok(TrainOutcome { model, scaler, best_epoch, best_f1, epochs, steps, val_probs })
}

/// Fits the feature scaler on the training records, loads both splits and
/// trains.
pub fn train_on_manifests(
    cfg: &RunConfig,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    opts: TrainOptions,
    log: Option<&mut dyn Write>,
) -> Result<(TrainOutcome, Split, Split)> {
    let extractor = FeatureExtractor::fit(&train_manifest.records);
    let train_split = Split::load(train_manifest, cfg, &extractor, opts.parallelism)?;
    let val_split = Split::load(val_manifest, cfg, &extractor, opts.parallelism)?;
    let outcome = train(cfg, &train_split, &val_split, extractor.scaler.clone(), opts, log)?;
    Ok((outcome, train_split, val_split))
}
