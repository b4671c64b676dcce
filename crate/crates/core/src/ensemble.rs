//! Power-weighted blending of per-model probability matrices and the
//! validation-set search over weights and powers.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::tensor::argmax;

pub const PROB_FLOOR: f64 = 1e-12;
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
pub const WEIGHT_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const POWER_GRID: [f64; 5] = [0.125, 0.25, 0.5, 1.0, 2.0];
/// Grids larger than this are subsampled.
pub const GRID_LIMIT: usize = 1 << 20;

pub type Row = [f64; NUM_CLASSES];

/// One model's probabilities over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    pub model_id: String,
    pub sample_ids: Vec<String>,
    pub rows: Vec<Row>,
}

impl ProbMatrix {
    pub fn new(model_id: impl Into<String>, sample_ids: Vec<String>, rows: Vec<Row>) -> Result<Self> {
        let model_id = model_id.into();
        if sample_ids.len() != rows.len() {
            return Err(Error::Shape(format!("{} sample ids for {} rows", sample_ids.len(), rows.len())));
        }
        for (id, row) in sample_ids.iter().zip(&rows) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Format(format!("model {model_id}, sample {id}: row {row:?} is not a probability distribution")));
            }
        }
        Ok(ProbMatrix { model_id, sample_ids, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(r)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.model_id, self.rows.len());
        for (id, row) in self.sample_ids.iter().zip(&self.rows) {
            out.push_str(id);
            for p in row {
                out.push(',');
                out.push_str(&format!("{p:e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
        let mut records = rdr.records();
        let header =
            records.next().ok_or_else(|| Error::Format("empty probability file".into()))?.map_err(|e| Error::Format(e.to_string()))?;
        if header.len() != 2 {
            return Err(Error::Format("first line must be `model_id,n_samples`".into()));
        }
        let model_id = header[0].to_string();
        let n: usize = header[1].trim().parse().map_err(|_| Error::Format(format!("bad sample count {:?}", &header[1])))?;
        let mut ids = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for (line, rec) in records.enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            if rec.len() != 1 + NUM_CLASSES {
                return Err(Error::Format(format!("row {}: expected {} fields, got {}", line + 1, 1 + NUM_CLASSES, rec.len())));
            }
            let mut row = [0.0; NUM_CLASSES];
            for (c, v) in row.iter_mut().enumerate() {
                *v =
                    rec[c + 1].trim().parse().map_err(|_| Error::Format(format!("row {}: bad probability {:?}", line + 1, &rec[c + 1])))?;
            }
            ids.push(rec[0].to_string());
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::Format(format!("header announces {n} samples, found {}", rows.len())));
        }
        ProbMatrix::new(model_id, ids, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ProbMatrix::from_csv(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Equal weights, unit powers.
    Average,
    /// Free weights, unit powers.
    Weighted,
    /// Free weights, one shared power.
    Power,
    /// Free weights and per-model powers.
    Unified,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Average, Variant::Weighted, Variant::Power, Variant::Unified];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Average => "average",
            Variant::Weighted => "weighted",
            Variant::Power => "power",
            Variant::Unified => "unified",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config(format!("unknown ensemble variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub variant: Variant,
    pub weights: Vec<f64>,
    pub powers: Vec<f64>,
    /// Validation F1 achieved when the spec was tuned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl EnsembleSpec {
    pub fn average(models: usize) -> Self {
        EnsembleSpec { variant: Variant::Average, weights: vec![1.0 / models as f64; models], powers: vec![1.0; models], f1: None }
    }

    pub fn unified(weights: Vec<f64>, powers: Vec<f64>) -> Self {
        EnsembleSpec { variant: Variant::Unified, weights, powers, f1: None }
    }

    pub fn models(&self) -> usize {
        self.weights.len()
    }

    /// Checks positivity and the parameter restrictions of the variant.
    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 || self.powers.len() != m {
            return Err(Error::Ensemble(format!("{} weights and {} powers", m, self.powers.len())));
        }
        if self.weights.iter().chain(&self.powers).any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Ensemble("weights and powers must be positive".into()));
        }
        let all_eq = |v: &[f64]| v.iter().all(|x| *x == v[0]);
        let unit = self.powers.iter().all(|&p| p == 1.0);
        let ok = match self.variant {
            Variant::Average => all_eq(&self.weights) && unit,
            Variant::Weighted => unit,
            Variant::Power => all_eq(&self.powers),
            Variant::Unified => true,
        };
        if !ok {
            return Err(Error::Ensemble(format!("parameters violate the {} variant restrictions", self.variant)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: EnsembleSpec = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EnsembleSpec::from_toml(&text)
    }

    fn key(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.powers).copied()
    }
}

fn check_aligned(mats: &[ProbMatrix]) -> Result<usize> {
    let first = mats.first().ok_or_else(|| Error::Ensemble("no probability matrices".into()))?;
    for m in &mats[1..] {
        if m.len() != first.len() {
            return Err(Error::Ensemble(format!(
                "model {} has {} rows, model {} has {}",
                m.model_id,
                m.len(),
                first.model_id,
                first.len()
            )));
        }
        if m.sample_ids != first.sample_ids {
            return Err(Error::Ensemble(format!("models {} and {} disagree on sample order", m.model_id, first.model_id)));
        }
    }
    Ok(first.len())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0)
}

/// `sum_m w_m * P_m^N_m` per cell, unnormalized.
pub fn blend(mats: &[ProbMatrix], spec: &EnsembleSpec) -> Result<Vec<Row>> {
    let n = check_aligned(mats)?;
    spec.validate()?;
    if spec.models() != mats.len() {
        return Err(Error::Ensemble(format!("spec covers {} models, got {} matrices", spec.models(), mats.len())));
    }
    let mut out = vec![[0.0; NUM_CLASSES]; n];
    for (m, mat) in mats.iter().enumerate() {
        let (w, pw) = (spec.weights[m], spec.powers[m]);
        for (o, row) in out.iter_mut().zip(&mat.rows) {
            for (c, &p) in row.iter().enumerate() {
                o[c] += w * clamp_prob(p).powf(pw);
            }
        }
    }
    Ok(out)
}

pub fn blend_predictions(mats: &[ProbMatrix], spec: &EnsembleSpec) -> Result<Vec<usize>> {
    Ok(blend(mats, spec)?.iter().map(|r| argmax(r)).collect())
}

/// Weighted F1 of argmax predictions, computed without allocation-heavy
/// report structures. Matches [`crate::metrics::weighted_f1`].
fn fast_f1(preds: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    let mut tp = [0u64; NUM_CLASSES];
    let mut predicted = [0u64; NUM_CLASSES];
    let mut support = [0u64; NUM_CLASSES];
    for (p, &t) in preds.zip(labels) {
        predicted[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let total: u64 = support.iter().sum();
    let mut acc = 0.0;
    for c in 0..NUM_CLASSES {
        let denom = support[c] + predicted[c];
        if denom > 0 {
            acc += support[c] as f64 * (2.0 * tp[c] as f64 / denom as f64);
        }
    }
    acc / total.max(1) as f64
}

/// Weighted F1 of a spec on labeled matrices.
pub fn score(mats: &[ProbMatrix], spec: &EnsembleSpec, labels: &[usize]) -> Result<f64> {
    let preds = blend_predictions(mats, spec)?;
    Ok(fast_f1(preds.into_iter(), labels))
}

#[derive(Debug, Clone, Copy)]
pub struct TuneOptions {
    /// Random refinement steps after the grid.
    pub budget: usize,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions { budget: 200, seed: 42, parallelism: Parallelism::default() }
    }
}

/// Clamped matrices raised to every grid power: `cache[m][k][row]`.
struct PowerCache {
    cache: Vec<Vec<Vec<Row>>>,
}

impl PowerCache {
    fn new(mats: &[ProbMatrix]) -> Self {
        let cache = mats
            .iter()
            .map(|m| POWER_GRID.iter().map(|&pw| m.rows.iter().map(|r| r.map(|p| clamp_prob(p).powf(pw))).collect()).collect())
            .collect();
        PowerCache { cache }
    }

    fn f1(&self, weights: &[f64], power_idx: &[usize], labels: &[usize]) -> f64 {
        let n = labels.len();
        let preds = (0..n).map(|i| {
            let mut s = [0.0; NUM_CLASSES];
            for (m, (&w, &k)) in weights.iter().zip(power_idx).enumerate() {
                let row = &self.cache[m][k][i];
                for c in 0..NUM_CLASSES {
                    s[c] += w * row[c];
                }
            }
            argmax(&s)
        });
        fast_f1(preds, labels)
    }
}

fn better(a: &(f64, EnsembleSpec), b: &(f64, EnsembleSpec)) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) | None => false,
        Some(Ordering::Equal) => a.1.key().partial_cmp(b.1.key()) == Some(Ordering::Less),
    }
}

/// Decodes grid candidate `idx` into weights and power indices.
fn decode(variant: Variant, m: usize, mut idx: usize) -> (Vec<f64>, Vec<usize>) {
    let nw = WEIGHT_GRID.len();
    let np = POWER_GRID.len();
    let unit = POWER_GRID.iter().position(|&p| p == 1.0).expect("grid contains 1");
    let mut weights = Vec::with_capacity(m);
    for _ in 0..m {
        weights.push(WEIGHT_GRID[idx % nw]);
        idx /= nw;
    }
    weights.reverse();
    let powers = match variant {
        Variant::Average | Variant::Weighted => vec![unit; m],
        Variant::Power => vec![idx % np; m],
        Variant::Unified => {
            let mut p = Vec::with_capacity(m);
            for _ in 0..m {
                p.push(idx % np);
                idx /= np;
            }
            p.reverse();
            p
        }
    };
    (weights, powers)
}

fn grid_size(variant: Variant, m: usize) -> Option<usize> {
    let w = WEIGHT_GRID.len().checked_pow(m as u32)?;
    match variant {
        Variant::Average => Some(1),
        Variant::Weighted => Some(w),
        Variant::Power => w.checked_mul(POWER_GRID.len()),
        Variant::Unified => w.checked_mul(POWER_GRID.len().checked_pow(m as u32)?),
    }
}

fn grid_search(cache: &PowerCache, labels: &[usize], variant: Variant, m: usize, opts: &TuneOptions) -> (f64, EnsembleSpec) {
    if variant == Variant::Average {
        let spec = EnsembleSpec::average(m);
        let unit = POWER_GRID.iter().position(|&p| p == 1.0).expect("grid contains 1");
        return (cache.f1(&spec.weights, &vec![unit; m], labels), spec);
    }
    let candidates: Vec<usize> = match grid_size(variant, m) {
        Some(n) if n <= GRID_LIMIT => (0..n).collect(),
        size => {
            let n = size.unwrap_or(usize::MAX);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_6964);
            let mut c: Vec<usize> = (0..GRID_LIMIT).map(|_| rng.random_range(0..n)).collect();
            c.sort_unstable();
            c.dedup();
            c
        }
    };
    let scored = par::map(opts.parallelism, &candidates, |&idx| {
        let (w, p) = decode(variant, m, idx);
        cache.f1(&w, &p, labels)
    });
    let mut best: Option<(f64, EnsembleSpec)> = None;
    for (&idx, f1) in candidates.iter().zip(scored) {
        let (w, p) = decode(variant, m, idx);
        let spec = EnsembleSpec { variant, weights: w, powers: p.iter().map(|&k| POWER_GRID[k]).collect(), f1: None };
        let cand = (f1, spec);
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(cand);
        }
    }
    best.expect("grid is non-empty")
}

/// Specs that reproduce each model's own predictions: weight 1 on the model
/// and, on every other model, a weight too small to move any argmax. Ties
/// within the chosen model's rows can still break differently.
fn solo_candidates(mats: &[ProbMatrix], variant: Variant) -> Vec<EnsembleSpec> {
    let m = mats.len();
    if m < 2 || variant == Variant::Average {
        return Vec::new();
    }
    mats.iter()
        .enumerate()
        .map(|(k, mat)| {
            let margin = mat
                .rows
                .iter()
                .map(|r| {
                    let mut v = r.map(|x| x.max(PROB_FLOOR));
                    v.sort_by(|a, b| b.total_cmp(a));
                    v[0] - v[1]
                })
                .filter(|&d| d > 0.0)
                .fold(1.0, f64::min);
            let eps = (margin / (2.0 * m as f64)).max(f64::MIN_POSITIVE);
            let weights = (0..m).map(|j| if j == k { 1.0 } else { eps }).collect();
            EnsembleSpec { variant, weights, powers: vec![1.0; m], f1: None }
        })
        .collect()
}

fn refine(mats: &[ProbMatrix], labels: &[usize], start: (f64, EnsembleSpec), opts: &TuneOptions) -> Result<(f64, EnsembleSpec)> {
    let variant = start.1.variant;
    if variant == Variant::Average || opts.budget == 0 {
        return Ok(start);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let step = Normal::new(0.0, 0.25).expect("valid normal");
    let mut best = start;
    for _ in 0..opts.budget {
        let mut spec = best.1.clone();
        for w in &mut spec.weights {
            *w = (*w * f64::exp(step.sample(&mut rng))).clamp(0.01, 2.0);
        }
        match variant {
            Variant::Power => {
                let p = (spec.powers[0] * f64::exp(step.sample(&mut rng))).clamp(0.05, 4.0);
                spec.powers.iter_mut().for_each(|x| *x = p);
            }
            Variant::Unified => {
                for p in &mut spec.powers {
                    *p = (*p * f64::exp(step.sample(&mut rng))).clamp(0.05, 4.0);
                }
            }
            _ => {}
        }
        let cand = (score(mats, &spec, labels)?, spec);
        if cand.0 > best.0 {
            best = cand;
        }
    }
    Ok(best)
}

/// Searches the grid for `variant`, then refines with `opts.budget` seeded
/// random perturbations. Every variant but the average also starts from
/// specs that reproduce each single model, and the unified search considers
/// the optima of the reduced variants, so it never scores below them.
pub fn tune(mats: &[ProbMatrix], labels: &[usize], variant: Variant, opts: &TuneOptions) -> Result<EnsembleSpec> {
    let n = check_aligned(mats)?;
    if n == 0 {
        return Err(Error::Ensemble("cannot tune on zero samples".into()));
    }
    if labels.len() != n {
        return Err(Error::Ensemble(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Label(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    let cache = PowerCache::new(mats);
    let m = mats.len();
    let search = |v: Variant| -> Result<(f64, EnsembleSpec)> {
        let mut start = grid_search(&cache, labels, v, m, opts);
        for spec in solo_candidates(mats, v) {
            let cand = (score(mats, &spec, labels)?, spec);
            if better(&cand, &start) {
                start = cand;
            }
        }
        refine(mats, labels, start, opts)
    };
    let mut best = search(variant)?;
    if variant == Variant::Unified {
        for reduced in [Variant::Average, Variant::Weighted, Variant::Power] {
            let (f1, mut spec) = search(reduced)?;
            spec.variant = Variant::Unified;
            if f1 > best.0 {
                best = (f1, spec);
            }
        }
    }
    let (f1, mut spec) = best;
    spec.f1 = Some(f1);
    Ok(spec)
}
