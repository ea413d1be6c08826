//! Classification metrics, ROC/AUC and the histograms behind the report plots.
//! The churner class is the positive class throughout.

use std::io::{BufWriter, Write};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub confusion: ConfusionMatrix,
    /// Nothing was predicted positive, so precision was set to 0.
    pub precision_undefined: bool,
    /// No actual positives, so recall was set to 0.
    pub recall_undefined: bool,
}

/// Predict churner iff `score >= threshold`.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if scores.is_empty() {
        return Err(Error::Data("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f_score,
        confusion: c,
        precision_undefined: c.tp + c.fp == 0,
        recall_undefined: c.tp + c.fn_ == 0,
    })
}

/// `(false positive rate, true positive rate)` from threshold +∞ down to −∞.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "fpr,tpr")?;
        for (f, t) in &self.points {
            writeln!(out, "{f},{t}")?;
        }
        out.flush()
    }
}

/// ROC curve with one step per distinct score, and its trapezoidal area.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::EmptyClass("churner"));
    }
    if neg == 0 {
        return Err(Error::EmptyClass("non-churner"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid in count units; normalized once at the end.
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok((RocCurve { points }, auc / (pos as f64 * neg as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` equally spaced edges over [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn unit(values: impl IntoIterator<Item = f64>, bins: usize) -> Result<Histogram> {
        if bins < 1 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins];
        for v in values {
            let b = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        Ok(Histogram { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "bin_low,bin_high,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDistribution {
    pub histogram: Histogram,
    /// `(actual, predicted)` per subscriber, for scatter plots.
    pub pairs: Vec<(f64, f64)>,
}

/// Histogram of `|predicted − actual|` over equal-width bins on [0, 1].
pub fn error_distribution(predicted: &[f64], actual: &[f64], bins: usize) -> Result<ErrorDistribution> {
    if predicted.len() != actual.len() {
        return Err(Error::Data("predicted and actual differ in length".into()));
    }
    let histogram = Histogram::unit(
        predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()),
        bins,
    )?;
    Ok(ErrorDistribution {
        histogram,
        pairs: actual.iter().copied().zip(predicted.iter().copied()).collect(),
    })
}

pub fn inactivity_distribution(pct_inactive: &[f64], bins: usize) -> Result<Histogram> {
    Histogram::unit(pct_inactive.iter().copied(), bins)
}
