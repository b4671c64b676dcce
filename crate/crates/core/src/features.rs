//! Explicit text statistics and text normalization.
//!
//! Each of the four text fields yields eight statistics, computed on the raw
//! (pre-normalization) string so that mentions and URLs are still visible:
//!
//! | idx | statistic |
//! |-----|-----------|
//! | 0 | word count (maximal non-whitespace runs) |
//! | 1 | character count (Unicode scalar values, whitespace included) |
//! | 2 | stopword count |
//! | 3 | `@mention` count |
//! | 4 | URL count |
//! | 5 | mean word length in characters |
//! | 6 | ASCII digit count outside mention/URL tokens |
//! | 7 | ASCII punctuation count outside mention/URL tokens |
//!
//! Fields are concatenated as claim text, document text, claim OCR, document
//! OCR, giving a 32-wide vector. Before entering the classifier every value is
//! mapped through `ln(1 + x)` and z-scored with a [`FeatureScaler`] fitted on
//! the training split.

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use crate::data::RawSample;
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::tensor::Tensor;

pub const STATS_PER_FIELD: usize = 8;
pub const NUM_FIELDS: usize = 4;
pub const FEATURE_DIM: usize = STATS_PER_FIELD * NUM_FIELDS;

pub const STAT_NAMES: [&str; STATS_PER_FIELD] =
    ["word_count", "char_count", "stopword_count", "mention_count", "url_count", "mean_word_length", "digit_count", "punctuation_count"];

pub const FIELD_NAMES: [&str; NUM_FIELDS] = ["claim_text", "doc_text", "claim_ocr", "doc_ocr"];

pub const STOPWORDS_TXT: &str = include_str!("../resources/stopwords.txt");
pub const ABBREVIATIONS_TXT: &str = include_str!("../resources/abbreviations.txt");
pub const EMOJI_TXT: &str = include_str!("../resources/emoji.txt");

/// SHA-256 of `resources/stopwords.txt`; the list is frozen.
pub const STOPWORDS_SHA256: &str = "6d8e6b98440939e713e85dc329b607645db097aa07f2cb57244e4f87c67009b3";

static STOPWORDS: LazyLock<HashSet<&'static str>> =
    LazyLock::new(|| STOPWORDS_TXT.lines().map(str::trim).filter(|l| !l.is_empty()).collect());

static ABBREVIATIONS: LazyLock<HashMap<&'static str, &'static str>> = LazyLock::new(|| parse_tab_table(ABBREVIATIONS_TXT));

static EMOJI: LazyLock<HashMap<&'static str, &'static str>> = LazyLock::new(|| parse_tab_table(EMOJI_TXT));

fn parse_tab_table(src: &'static str) -> HashMap<&'static str, &'static str> {
    src.lines().filter_map(|l| l.split_once('\t')).map(|(k, v)| (k.trim(), v.trim())).collect()
}

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(word)
}

pub fn is_url(token: &str) -> bool {
    token.starts_with("http://") || token.starts_with("https://") || token.starts_with("www.")
}

pub fn is_mention(token: &str) -> bool {
    let mut chars = token.chars();
    chars.next() == Some('@') && chars.next().is_some_and(|c| c.is_alphanumeric() || c == '_')
}

/// The eight statistics of one text field, as raw (unscaled) values.
pub fn extract_field_features(text: &str) -> [f64; STATS_PER_FIELD] {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut stats = [0.0; STATS_PER_FIELD];
    stats[0] = tokens.len() as f64;
    stats[1] = text.chars().count() as f64;
    let mut total_len = 0usize;
    for tok in &tokens {
        total_len += tok.chars().count();
        if is_url(tok) {
            stats[4] += 1.0;
            continue;
        }
        if is_mention(tok) {
            stats[3] += 1.0;
            continue;
        }
        let core = tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        if is_stopword(&core) {
            stats[2] += 1.0;
        }
        stats[6] += tok.chars().filter(char::is_ascii_digit).count() as f64;
        stats[7] += tok.chars().filter(char::is_ascii_punctuation).count() as f64;
    }
    if !tokens.is_empty() {
        stats[5] = total_len as f64 / tokens.len() as f64;
    }
    stats
}

/// Unscaled 32-wide feature vector of a sample.
pub fn raw_features(sample: &RawSample) -> [f64; FEATURE_DIM] {
    let fields = [&sample.claim_text, &sample.doc_text, &sample.claim_ocr, &sample.doc_ocr];
    let mut out = [0.0; FEATURE_DIM];
    for (f, text) in fields.into_iter().enumerate() {
        out[f * STATS_PER_FIELD..(f + 1) * STATS_PER_FIELD].copy_from_slice(&extract_field_features(text));
    }
    out
}

pub fn raw_features_batch(samples: &[RawSample], mode: Parallelism) -> Vec<[f64; FEATURE_DIM]> {
    par::map(mode, samples, raw_features)
}

/// `ln(1 + x)` then z-score, with statistics frozen at fit time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl FeatureScaler {
    /// Identity on the log scale: mean 0, std 1.
    pub fn identity() -> Self {
        FeatureScaler { mean: [0.0; FEATURE_DIM], std: [1.0; FEATURE_DIM] }
    }

    pub fn fit(raw: &[[f64; FEATURE_DIM]]) -> Self {
        if raw.is_empty() {
            return Self::identity();
        }
        let n = raw.len() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        let mut std = [0.0; FEATURE_DIM];
        for row in raw {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.ln_1p();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in raw {
            for j in 0..FEATURE_DIM {
                std[j] += (row[j].ln_1p() - mean[j]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-8 {
                *s = 1.0;
            }
        }
        FeatureScaler { mean, std }
    }

    pub fn transform(&self, raw: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for j in 0..FEATURE_DIM {
            out[j] = (raw[j].ln_1p() - self.mean[j]) / self.std[j];
        }
        out
    }

    /// `[2 × 32]` tensor: row 0 means, row 1 standard deviations.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.mean.iter().chain(&self.std).map(|&v| v as f32).collect();
        Tensor::new(&[2, FEATURE_DIM], data).expect("fixed shape")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.dims() != [2, FEATURE_DIM] {
            return Err(Error::Format(format!("scaler tensor must be [2x{FEATURE_DIM}], got {}", t.shape())));
        }
        let mut s = Self::identity();
        for j in 0..FEATURE_DIM {
            s.mean[j] = t.data()[j] as f64;
            s.std[j] = t.data()[FEATURE_DIM + j] as f64;
        }
        if s.std.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Format("scaler standard deviations must be positive".into()));
        }
        Ok(s)
    }
}

/// Scaled feature vector fed to the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub scaler: FeatureScaler,
}

impl FeatureExtractor {
    pub fn fit(train: &[RawSample]) -> Self {
        let raw = raw_features_batch(train, Parallelism::Parallel);
        FeatureExtractor { scaler: FeatureScaler::fit(&raw) }
    }

    pub fn extract(&self, sample: &RawSample) -> FeatureVector {
        FeatureVector(self.scaler.transform(&raw_features(sample)))
    }

    pub fn extract_batch(&self, samples: &[RawSample], mode: Parallelism) -> Vec<FeatureVector> {
        par::map(mode, samples, |s| self.extract(s))
    }
}

// ---- normalization ---------------------------------------------------------

fn is_emoji_char(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF | 0x2600..=0x27BF | 0x2B00..=0x2BFF | 0x2190..=0x21FF | 0x2300..=0x23FF)
}

fn replace_emoji(raw: &str) -> String {
    let chars: Vec<char> = raw.chars().collect();
    let mut out = String::with_capacity(raw.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\u{FE0F}' || c == '\u{200D}' {
            i += 1;
            continue;
        }
        if i + 1 < chars.len() {
            let pair: String = chars[i..i + 2].iter().collect();
            if let Some(desc) = EMOJI.get(pair.as_str()) {
                out.push(' ');
                out.push_str(desc);
                out.push(' ');
                i += 2;
                continue;
            }
        }
        let mut buf = [0u8; 4];
        if let Some(desc) = EMOJI.get(&*c.encode_utf8(&mut buf)) {
            out.push(' ');
            out.push_str(desc);
            out.push(' ');
        } else if is_emoji_char(c) {
            out.push_str(" emoji ");
        } else {
            out.push(c);
        }
        i += 1;
    }
    out
}

fn expand_abbreviation(token: &str) -> String {
    let lower = token.to_lowercase();
    if let Some(exp) = ABBREVIATIONS.get(lower.as_str()) {
        return (*exp).to_string();
    }
    let core = lower.trim_end_matches(['.', ',', '!', '?', ';', ':']);
    if core.len() < lower.len() {
        if let Some(exp) = ABBREVIATIONS.get(core) {
            return format!("{exp}{}", &lower[core.len()..]);
        }
    }
    token.to_string()
}

/// Replaces emoji with their descriptions, drops `@mention` and URL tokens,
/// expands abbreviations and collapses whitespace.
pub fn normalize_text(raw: &str) -> String {
    let replaced = replace_emoji(raw);
    replaced.split_whitespace().filter(|t| !is_url(t) && !is_mention(t)).map(expand_abbreviation).collect::<Vec<_>>().join(" ")
}
