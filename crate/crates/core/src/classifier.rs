//! Classifier head and the joint cross-entropy / supervised contrastive loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::param::{glorot, ParamGroup, ParamId, ParamStore};
use crate::tensor::{s, Scalar, Tensor};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub wz1: ParamId,
    pub wz2: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `relu(O Wz1)`, the contrastive embedding before normalization.
    pub hidden: Var,
    pub probs: Var,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, in_dim: usize, hidden: usize) -> Self {
        let wz1 = store.add("head.Wz1", glorot(rng, in_dim, hidden), ParamGroup::Primary);
        let wz2 = store.add("head.Wz2", glorot(rng, hidden, NUM_CLASSES), ParamGroup::Primary);
        ClassifierHead { wz1, wz2, in_dim, hidden }
    }

    /// `softmax(relu(O Wz1) Wz2)` over a `[batch x in_dim]` input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, o: Var) -> Result<HeadOutput> {
        let dims = g.value(o).dims();
        if dims.len() != 2 || dims[1] != self.in_dim {
            return Err(Error::Shape(format!("classifier input width: expected {}, got {}", self.in_dim, g.value(o).shape())));
        }
        let w1 = g.param(store, self.wz1);
        let w2 = g.param(store, self.wz2);
        let h = g.matmul(o, w1)?;
        let hidden = g.relu(h);
        let logits = g.matmul(hidden, w2)?;
        let probs = g.softmax(logits, 1)?;
        Ok(HeadOutput { hidden, probs })
    }
}

fn check_labels(labels: &[usize], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Label(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// Mean of `-ln(max(p_y, 1e-12))` over the batch.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let (batch, classes) = g.value(probs).matrix_dims()?;
    if classes != NUM_CLASSES {
        return Err(Error::Shape(format!("probabilities have {classes} columns, expected {NUM_CLASSES}")));
    }
    check_labels(labels, batch)?;
    let mut onehot = vec![T::zero(); batch * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = T::one();
    }
    let onehot = g.constant(Tensor::new(&[batch, classes], onehot)?);
    let logp = g.log_clamped(probs, LOG_FLOOR);
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked);
    Ok(g.scale(total, s(-1.0 / batch as f64)))
}

/// Supervised contrastive loss over L2-normalized rows of `emb`. Anchors
/// without a same-label partner are skipped; the result is the mean over the
/// remaining anchors (0 when there are none).
pub fn supcon_loss<T: Scalar>(g: &mut Graph<T>, emb: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let (batch, _) = g.value(emb).matrix_dims()?;
    if batch < 2 {
        return Err(Error::Contract(format!("contrastive loss needs a batch of at least 2, got {batch}")));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_labels(labels, batch)?;

    let mut weights = vec![T::zero(); batch * batch];
    let mut anchors = 0usize;
    for i in 0..batch {
        let pos: Vec<usize> = (0..batch).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let w = s::<T>(1.0 / pos.len() as f64);
        for p in pos {
            weights[i * batch + p] = w;
        }
    }
    if anchors == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }

    let z = g.l2_normalize_rows(emb)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, s(1.0 / tau));
    let keep = (0..batch * batch).map(|k| k / batch != k % batch).collect();
    let logp = g.log_softmax_masked(sim, keep)?;
    let w = g.constant(Tensor::new(&[batch, batch], weights)?);
    let picked = g.mul(logp, w)?;
    let total = g.sum(picked);
    Ok(g.scale(total, s(-1.0 / anchors as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.0, tau: 0.3 }
    }
}

impl LossConfig {
    /// Cross-entropy only.
    pub fn final_model() -> Self {
        Self::default()
    }

    /// 0.7 cross-entropy, 0.3 contrastive.
    pub fn joint() -> Self {
        LossConfig { alpha: 0.7, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce: Var,
    pub supcon: Option<Var>,
    pub total: Var,
}

/// `alpha * CE + (1 - alpha) * SupCon`. The unused term is not built when
/// `alpha` is exactly 0 or 1.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, out: HeadOutput, labels: &[usize], cfg: &LossConfig) -> Result<LossParts> {
    cfg.validate()?;
    let ce = cross_entropy(g, out.probs, labels)?;
    if cfg.alpha == 1.0 {
        return Ok(LossParts { ce, supcon: None, total: ce });
    }
    let sc = supcon_loss(g, out.hidden, labels, cfg.tau)?;
    if cfg.alpha == 0.0 {
        return Ok(LossParts { ce, supcon: Some(sc), total: sc });
    }
    let a = g.scale(ce, s(cfg.alpha));
    let b = g.scale(sc, s(1.0 - cfg.alpha));
    let total = g.add(a, b)?;
    Ok(LossParts { ce, supcon: Some(sc), total })
}
