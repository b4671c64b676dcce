//! Samples, dataset manifests, embedding ingestion and the synthetic
//! dataset generator.
//!
//! A manifest is a JSON-lines file, one [`RawSample`] per line. Embedding
//! references are paths relative to the manifest's directory, each naming a
//! single-tensor file (`[seq_len × backbone_dim]`).

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::normalize_text;
use crate::par::{self, Parallelism};
use crate::tensor::Tensor;
use crate::tensor_io::{load_tensor, save_tensor};

pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "Support_Text")]
    SupportText,
    #[serde(rename = "Support_Multimodal")]
    SupportMultimodal,
    #[serde(rename = "Insufficient_Text")]
    InsufficientText,
    #[serde(rename = "Insufficient_Multimodal")]
    InsufficientMultimodal,
    #[serde(rename = "Refute")]
    Refute,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] =
        [Label::SupportText, Label::SupportMultimodal, Label::InsufficientText, Label::InsufficientMultimodal, Label::Refute];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Label(format!("class index {i} not in 0..{NUM_CLASSES}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::SupportText => "Support_Text",
            Label::SupportMultimodal => "Support_Multimodal",
            Label::InsufficientText => "Insufficient_Text",
            Label::InsufficientMultimodal => "Insufficient_Multimodal",
            Label::Refute => "Refute",
        }
    }

    fn text_similar(self) -> bool {
        matches!(self, Label::SupportText | Label::SupportMultimodal)
    }

    fn image_similar(self) -> bool {
        matches!(self, Label::SupportMultimodal | Label::InsufficientMultimodal)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|l| l.name().eq_ignore_ascii_case(s)).ok_or_else(|| Error::Label(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub claim_text: String,
    pub claim_ocr: String,
    pub doc_text: String,
    pub doc_ocr: String,
    pub claim_image_embedding_ref: String,
    pub doc_image_embedding_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim_text_embedding_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_text_embedding_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl RawSample {
    /// Text-only sample with empty fields and the given image references.
    pub fn empty(id: impl Into<String>) -> Self {
        RawSample {
            id: id.into(),
            claim_text: String::new(),
            claim_ocr: String::new(),
            doc_text: String::new(),
            doc_ocr: String::new(),
            claim_image_embedding_ref: String::new(),
            doc_image_embedding_ref: String::new(),
            claim_text_embedding_ref: None,
            doc_text_embedding_ref: None,
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub records: Vec<RawSample>,
    pub embedding_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RawSample = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(rec);
        }
        let split = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
        let embedding_dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(DatasetManifest { split, records, embedding_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn labels(&self) -> Result<Vec<Label>> {
        self.records.iter().map(|r| r.label.ok_or_else(|| Error::Sample { sample: r.id.clone(), reason: "missing label".into() })).collect()
    }
}

/// The four embedding sequences of a sample, `[seq_len × backbone_dim]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTensors {
    pub claim_text: Tensor<f32>,
    pub claim_image: Tensor<f32>,
    pub doc_text: Tensor<f32>,
    pub doc_image: Tensor<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub max_seq_len: usize,
    /// Width of the hash-based text embedding used when a sample has no
    /// precomputed text embedding.
    pub fallback_text_dim: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { max_seq_len: 512, fallback_text_dim: 32 }
    }
}

fn sample_err(id: &str, reason: impl Into<String>) -> Error {
    Error::Sample { sample: id.to_string(), reason: reason.into() }
}

fn load_stream(dir: &Path, id: &str, reference: &str, max_len: usize) -> Result<Tensor<f32>> {
    let path = dir.join(reference);
    let t = load_tensor(&path).map_err(|e| sample_err(id, format!("embedding {reference}: {e}")))?;
    truncate_rows(t, max_len).map_err(|e| sample_err(id, format!("embedding {reference}: {e}")))
}

fn truncate_rows(t: Tensor<f32>, max_len: usize) -> Result<Tensor<f32>> {
    let (rows, cols) = t.matrix_dims()?;
    if rows <= max_len {
        return Ok(t);
    }
    let mut data = t.into_data();
    data.truncate(max_len * cols);
    Tensor::new(&[max_len, cols], data)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic stand-in for a text encoder: each normalized token maps to
/// a vector drawn from a generator seeded by the token's hash. Intended for
/// tests and smoke runs only; it carries no semantics beyond token identity.
pub fn hashed_text_embedding(text: &str, dim: usize, max_len: usize) -> Tensor<f32> {
    let normalized = normalize_text(text);
    let tokens: Vec<&str> = normalized.split_whitespace().take(max_len.max(1)).collect();
    if tokens.is_empty() {
        return Tensor::zeros(&[1, dim]);
    }
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for tok in &tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok.to_lowercase().as_bytes()));
        data.extend((0..dim).map(|_| rng.random_range(-1.0f32..1.0)));
    }
    Tensor::new(&[tokens.len(), dim], data).expect("non-empty")
}

pub fn load_sample(dir: &Path, s: &RawSample, opts: &IngestOptions) -> Result<StreamTensors> {
    let claim_image = load_stream(dir, &s.id, &s.claim_image_embedding_ref, opts.max_seq_len)?;
    let doc_image = load_stream(dir, &s.id, &s.doc_image_embedding_ref, opts.max_seq_len)?;
    let claim_text = s.claim_text_embedding_ref.as_deref().map(|r| load_stream(dir, &s.id, r, opts.max_seq_len));
    let doc_text = s.doc_text_embedding_ref.as_deref().map(|r| load_stream(dir, &s.id, r, opts.max_seq_len));
    let claim_text = claim_text.transpose()?;
    let doc_text = doc_text.transpose()?;
    let text_dim = claim_text.as_ref().or(doc_text.as_ref()).map_or(opts.fallback_text_dim, |t| t.dims()[1]);
    let fallback = |text: &str| hashed_text_embedding(text, text_dim, opts.max_seq_len);
    Ok(StreamTensors {
        claim_text: claim_text.unwrap_or_else(|| fallback(&s.claim_text)),
        claim_image,
        doc_text: doc_text.unwrap_or_else(|| fallback(&s.doc_text)),
        doc_image,
    })
}

/// Lazily loads every sample's embeddings in manifest order.
pub fn ingest<'a>(manifest: &'a DatasetManifest, opts: IngestOptions) -> impl Iterator<Item = Result<(RawSample, StreamTensors)>> + 'a {
    manifest.records.iter().map(move |s| load_sample(&manifest.embedding_dir, s, &opts).map(|t| (s.clone(), t)))
}

/// Loads every sample, possibly on worker threads; order is preserved.
pub fn ingest_all(manifest: &DatasetManifest, opts: IngestOptions, mode: Parallelism) -> Result<Vec<StreamTensors>> {
    par::map(mode, &manifest.records, |s| load_sample(&manifest.embedding_dir, s, &opts)).into_iter().collect()
}

// ---------------------------------------------------------------------------
// Synthetic data.

/// Knobs of the synthetic generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub backbone_dim: usize,
    /// Rank of the subspace latents live in.
    pub latent_rank: usize,
    /// Per-position isotropic noise around the stream latent.
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Unrelated latents are redrawn until their absolute cosine to the
    /// claim latent is below this bound.
    pub max_unrelated_cos: f64,
}

impl SynthConfig {
    pub fn new(backbone_dim: usize) -> Self {
        SynthConfig { backbone_dim, latent_rank: 3, noise: 0.3, min_len: 3, max_len: 8, max_unrelated_cos: 0.5 }
    }
}

/// Ground-truth stream latents of one synthetic sample, `backbone_dim` wide.
#[derive(Debug, Clone)]
pub struct SampleLatents {
    pub claim_text: Vec<f32>,
    pub doc_text: Vec<f32>,
    pub claim_image: Vec<f32>,
    pub doc_image: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// `(reference, tensor)` for every embedding the manifest names.
    pub embeddings: Vec<(String, Tensor<f32>)>,
    pub latents: Vec<SampleLatents>,
}

impl SyntheticDataset {
    /// Writes `<dir>/<split>.jsonl` and the embedding files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("emb")).map_err(|e| Error::io(dir, e))?;
        for (r, t) in &self.embeddings {
            save_tensor(&dir.join(r), t)?;
        }
        let path = dir.join(format!("{}.jsonl", self.manifest.split));
        self.manifest.save(&path)?;
        Ok(path)
    }

    /// Stream tensors in manifest order, without touching the filesystem.
    pub fn stream_tensors(&self) -> Vec<StreamTensors> {
        self.embeddings
            .chunks(4)
            .map(|c| StreamTensors {
                claim_text: c[0].1.clone(),
                claim_image: c[1].1.clone(),
                doc_text: c[2].1.clone(),
                doc_image: c[3].1.clone(),
            })
            .collect()
    }
}

const TOPIC_WORDS: &[&str] = &[
    "vaccine",
    "election",
    "flood",
    "minister",
    "protest",
    "budget",
    "cricket",
    "virus",
    "border",
    "airport",
    "festival",
    "hospital",
    "court",
    "farmers",
    "railway",
    "temple",
    "senate",
    "wildfire",
    "market",
    "school",
    "police",
    "storm",
    "rally",
    "bridge",
    "factory",
    "museum",
    "harvest",
    "satellite",
    "stadium",
    "village",
];
const FILLERS: &[&str] = &["the", "a", "of", "in", "and", "to", "is", "on", "for", "with", "was", "at", "by"];
const CONTRADICTION: &[&str] = &["not", "false", "fake", "hoax", "debunked", "never", "denied"];

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    (0..n).map(|_| normal.sample(rng)).collect()
}

struct LatentSpace {
    /// `latent_rank` rows of width `backbone_dim`.
    basis: Vec<Vec<f64>>,
}

impl LatentSpace {
    fn new(rng: &mut impl Rng, cfg: &SynthConfig) -> Self {
        let scale = 1.0 / (cfg.latent_rank as f64).sqrt();
        let basis = (0..cfg.latent_rank).map(|_| gaussian_vec(rng, cfg.backbone_dim).into_iter().map(|v| v * scale).collect()).collect();
        LatentSpace { basis }
    }

    fn draw_unrelated(&self, rng: &mut impl Rng, to: &[f64], max_cos: f64) -> Vec<f64> {
        loop {
            let v = self.draw(rng);
            if cosine(&v, to).abs() < max_cos {
                return v;
            }
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let coef = gaussian_vec(rng, self.basis.len());
        let dim = self.basis[0].len();
        (0..dim).map(|j| coef.iter().zip(&self.basis).map(|(c, b)| c * b[j]).sum()).collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn sequence(rng: &mut impl Rng, latent: &[f64], cfg: &SynthConfig) -> Tensor<f32> {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let normal = Normal::new(0.0, cfg.noise).expect("valid");
    let data = (0..len).flat_map(|_| latent.iter().map(|&v| (v + normal.sample(rng)) as f32).collect::<Vec<_>>()).collect();
    Tensor::new(&[len, latent.len()], data).expect("positive length")
}

fn poisson(rng: &mut impl Rng, mean: f64) -> usize {
    Poisson::new(mean).map_or(0, |p| p.sample(rng) as usize)
}

fn words(rng: &mut impl Rng, topic: &[&'static str], n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.35) {
                FILLERS.choose(rng).expect("non-empty").to_string()
            } else {
                topic.choose(rng).expect("non-empty").to_string()
            }
        })
        .collect()
}

fn decorate(rng: &mut impl Rng, mut body: Vec<String>, mentions: f64, urls: f64) -> String {
    for _ in 0..poisson(rng, mentions) {
        let at = rng.random_range(0..=body.len());
        body.insert(at, format!("@user{}", rng.random_range(0..100)));
    }
    for _ in 0..poisson(rng, urls) {
        body.push(format!("https://news.example/{}", rng.random_range(0..10_000)));
    }
    body.join(" ")
}

/// Generates `n_per_class` samples of each category. Class semantics are
/// planted in the stream latents: similar streams share a latent, unrelated
/// streams draw independent ones, refuted streams carry the negated latent.
/// The text fields get class-correlated mention, URL, stopword and
/// contradiction-token statistics, and OCR strings of similar images share
/// their words.
pub fn synthesize(split: &str, n_per_class: usize, cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.latent_rank == 0 || cfg.backbone_dim == 0 || !(cfg.max_unrelated_cos > 0.05) {
        return Err(Error::Config(format!("invalid synthetic config {cfg:?}")));
    }
    // The latent subspaces depend only on the seed's high bits so that splits
    // generated with seeds `s` and `s + 1` share them.
    let mut space_rng = ChaCha8Rng::seed_from_u64(seed & !0xFFFF);
    let text_space = LatentSpace::new(&mut space_rng, cfg);
    let image_space = LatentSpace::new(&mut space_rng, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<Label> = Label::ALL.iter().flat_map(|&l| std::iter::repeat_n(l, n_per_class)).collect();
    labels.shuffle(&mut rng);

    let mut records = Vec::with_capacity(labels.len());
    let mut embeddings = Vec::with_capacity(labels.len() * 4);
    let mut latents = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("{split}-{i:05}");
        let ct = text_space.draw(&mut rng);
        let dt = match label {
            _ if label.text_similar() => ct.clone(),
            Label::Refute => ct.iter().map(|v| -v).collect(),
            _ => text_space.draw_unrelated(&mut rng, &ct, cfg.max_unrelated_cos),
        };
        let ci = image_space.draw(&mut rng);
        let di = match label {
            _ if label.image_similar() => ci.clone(),
            Label::Refute => ci.iter().map(|v| -v).collect(),
            _ => image_space.draw_unrelated(&mut rng, &ci, cfg.max_unrelated_cos),
        };

        let topic: Vec<&'static str> = TOPIC_WORDS.choose_multiple(&mut rng, 4).copied().collect();
        let other: Vec<&'static str> = TOPIC_WORDS.choose_multiple(&mut rng, 4).copied().collect();
        let n_claim = rng.random_range(6..=12);
        let claim_words = words(&mut rng, &topic, n_claim);
        let mut doc_words = if label.text_similar() || label == Label::Refute {
            let n_extra = rng.random_range(4..=14);
            let mut w = claim_words.clone();
            w.extend(words(&mut rng, &topic, n_extra));
            w
        } else {
            let n_doc = rng.random_range(10..=26);
            words(&mut rng, &other, n_doc)
        };
        if label == Label::Refute {
            for _ in 0..rng.random_range(1..=3) {
                let at = rng.random_range(0..=doc_words.len());
                doc_words.insert(at, CONTRADICTION.choose(&mut rng).expect("non-empty").to_string());
            }
        }
        let (mentions, urls) = match label {
            Label::SupportText | Label::SupportMultimodal => (0.4, 1.2),
            Label::InsufficientText | Label::InsufficientMultimodal => (1.2, 0.4),
            Label::Refute => (0.8, 0.8),
        };
        let claim_text = decorate(&mut rng, claim_words, mentions, urls * 0.5);
        let doc_text = decorate(&mut rng, doc_words, mentions * 0.5, urls);

        let n_ocr = rng.random_range(0..=6);
        let ocr_words = words(&mut rng, &topic, n_ocr);
        let claim_ocr = ocr_words.join(" ");
        let doc_ocr = if label.image_similar() {
            claim_ocr.clone()
        } else {
            let n_ocr = rng.random_range(0..=6);
            words(&mut rng, &other, n_ocr).join(" ")
        };

        let refs: Vec<String> = ["ct", "ci", "dt", "di"].iter().map(|s| format!("emb/{id}.{s}.pcft")).collect();
        embeddings.push((refs[0].clone(), sequence(&mut rng, &ct, cfg)));
        embeddings.push((refs[1].clone(), sequence(&mut rng, &ci, cfg)));
        embeddings.push((refs[2].clone(), sequence(&mut rng, &dt, cfg)));
        embeddings.push((refs[3].clone(), sequence(&mut rng, &di, cfg)));
        let f32v = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        latents.push(SampleLatents { claim_text: f32v(&ct), doc_text: f32v(&dt), claim_image: f32v(&ci), doc_image: f32v(&di) });
        records.push(RawSample {
            id,
            claim_text,
            claim_ocr,
            doc_text,
            doc_ocr,
            claim_image_embedding_ref: refs[1].clone(),
            doc_image_embedding_ref: refs[3].clone(),
            claim_text_embedding_ref: Some(refs[0].clone()),
            doc_text_embedding_ref: Some(refs[2].clone()),
            label: Some(label),
        });
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest { split: split.to_string(), records, embedding_dir: PathBuf::from(".") },
        embeddings,
        latents,
    })
}
