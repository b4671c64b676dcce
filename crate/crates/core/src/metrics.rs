//! Confusion matrices and support-weighted F1.

use std::fmt::Write as _;

use crate::data::{Label, NUM_CLASSES};
use crate::error::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { classes: n, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Label(format!("class pair ({truth}, {pred}) outside 0..{}", self.classes)));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        hit as f64 / self.total().max(1) as f64
    }

    /// Per-class F1; a zero denominator yields 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let denom = (self.support(c) + self.predicted(c)) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let names = class_names(self.classes);
        let mut out = String::from("true\\pred");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (t, name) in names.iter().enumerate() {
            out.push_str(name);
            for p in 0..self.classes {
                let _ = write!(out, ",{}", self.get(t, p));
            }
            out.push('\n');
        }
        out
    }
}

/// Confusion matrix over the five categories.
pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    confusion_n(preds, labels, NUM_CLASSES)
}

pub fn confusion_n(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub weighted: f64,
    pub per_class: Vec<f64>,
    pub support: Vec<u64>,
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<F1Report> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("weighted F1 of an empty confusion matrix".into()));
    }
    let per_class = cm.per_class_f1();
    let support: Vec<u64> = (0..cm.classes()).map(|c| cm.support(c)).collect();
    let weighted = per_class.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64;
    Ok(F1Report { weighted, per_class, support })
}

fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| match (classes, Label::from_index(c)) {
            (NUM_CLASSES, Ok(l)) => l.name().to_string(),
            _ => format!("class{c}"),
        })
        .collect()
}

/// Per-class F1 and support as CSV, ending with a weighted row.
pub fn f1_csv(report: &F1Report) -> String {
    let mut out = String::from("class,f1,support\n");
    for (name, (f, s)) in class_names(report.per_class.len()).iter().zip(report.per_class.iter().zip(&report.support)) {
        let _ = writeln!(out, "{name},{f:.6},{s}");
    }
    let total: u64 = report.support.iter().sum();
    let _ = writeln!(out, "weighted,{:.6},{total}", report.weighted);
    out
}

/// Aligned console table of the confusion matrix and F1 values.
pub fn text_report(cm: &ConfusionMatrix, report: &F1Report) -> String {
    let names = class_names(cm.classes());
    let w = names.iter().map(|n| n.len()).max().unwrap_or(5).max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<w$}", "true\\pred");
    for n in &names {
        let _ = write!(out, " {n:>w$}");
    }
    let _ = writeln!(out, " {:>8} {:>8}", "f1", "support");
    for (t, name) in names.iter().enumerate() {
        let _ = write!(out, "{name:<w$}");
        for p in 0..cm.classes() {
            let _ = write!(out, " {:>w$}", cm.get(t, p));
        }
        let _ = writeln!(out, " {:>8.4} {:>8}", report.per_class[t], report.support[t]);
    }
    let _ = writeln!(out, "weighted F1 {:.4}  accuracy {:.4}  n {}", report.weighted, cm.accuracy(), cm.total());
    out
}
