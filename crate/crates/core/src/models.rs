//! Supervised learners producing a Churn Score in [0, 1], k-fold
//! cross-validation and the single-feature threshold baseline.
//!
//! Every learner standardizes features with training-set statistics before
//! fitting; the tree ensembles are insensitive to it and split raw values.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::labeling::LabelSet;
use crate::matrix::FeatureMatrix;
use crate::metrics::{classification_metrics, roc_auc};
use crate::simgen::sub_seed;
use crate::tree::{fit_tree, BinnedData, DecisionTree, MaxFeatures, Node, TreeParams, TreeTask, MAX_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ModelFamily {
    #[serde(rename = "linreg")]
    LinReg,
    #[serde(rename = "logreg")]
    LogReg,
    #[serde(rename = "linear_svm")]
    LinearSvm,
    #[serde(rename = "knn")]
    Knn,
    #[serde(rename = "random_forest")]
    RandomForest,
    #[serde(rename = "adaboost")]
    AdaBoost,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 6] = [
        ModelFamily::LinReg,
        ModelFamily::LogReg,
        ModelFamily::LinearSvm,
        ModelFamily::Knn,
        ModelFamily::RandomForest,
        ModelFamily::AdaBoost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::LinReg => "linreg",
            ModelFamily::LogReg => "logreg",
            ModelFamily::LinearSvm => "linear_svm",
            ModelFamily::Knn => "knn",
            ModelFamily::RandomForest => "random_forest",
            ModelFamily::AdaBoost => "adaboost",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        ModelFamily::ALL.get(t as usize).copied()
    }

    /// Default hyperparameters with their valid ranges (inclusive).
    fn defaults(self) -> &'static [(&'static str, f64, f64, f64)] {
        match self {
            ModelFamily::LinReg => &[("ridge", 1e-3, 0.0, f64::MAX)],
            ModelFamily::LogReg => &[
                ("learning_rate", 0.1, 1e-12, f64::MAX),
                ("l2", 1e-4, 0.0, f64::MAX),
                ("epochs", 200.0, 1.0, 1e7),
            ],
            ModelFamily::LinearSvm => &[
                ("lambda", 1e-4, 1e-12, f64::MAX),
                ("epochs", 10.0, 1.0, 1e6),
                ("eta0", 0.1, 1e-12, f64::MAX),
            ],
            ModelFamily::Knn => &[("k", 15.0, 1.0, 1e9)],
            // max_depth 0 = unlimited; max_features 0 = √p; bootstrap is 0/1.
            ModelFamily::RandomForest => &[
                ("n_trees", 100.0, 1.0, 1e6),
                ("max_depth", 12.0, 0.0, 1e4),
                ("max_features", 0.0, 0.0, 1e9),
                ("bootstrap", 1.0, 0.0, 1.0),
            ],
            ModelFamily::AdaBoost => &[("rounds", 100.0, 1.0, 1e6), ("max_depth", 2.0, 1.0, 1e4)],
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Target {
    #[serde(rename = "binary")]
    Binary,
    #[serde(rename = "continuous")]
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub hyperparameters: BTreeMap<String, f64>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, seed: u64) -> Self {
        let hyperparameters = family
            .defaults()
            .iter()
            .map(|(k, v, _, _)| (k.to_string(), *v))
            .collect();
        ModelSpec {
            family,
            hyperparameters,
            seed,
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.hyperparameters.insert(key.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let defaults = self.family.defaults();
        for (key, value) in &self.hyperparameters {
            let Some((_, _, lo, hi)) = defaults.iter().find(|d| d.0 == key) else {
                return Err(Error::Config(format!(
                    "{}: unknown hyperparameter `{key}`",
                    self.family
                )));
            };
            if !(value.is_finite() && *value >= *lo && *value <= *hi) {
                return Err(Error::Config(format!(
                    "{}: `{key}` = {value} outside [{lo}, {hi}]",
                    self.family
                )));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> f64 {
        self.hyperparameters.get(key).copied().unwrap_or_else(|| {
            self.family
                .defaults()
                .iter()
                .find(|d| d.0 == key)
                .map(|d| d.1)
                .expect("known hyperparameter")
        })
    }

    fn get_usize(&self, key: &str) -> usize {
        self.get(key).round() as usize
    }
}

/// Per-feature centering and scaling from the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(matrix: &FeatureMatrix) -> Self {
        let n = matrix.n_rows().max(1) as f64;
        let p = matrix.n_cols();
        let mut mean = vec![0.0; p];
        for i in 0..matrix.n_rows() {
            for (m, v) in mean.iter_mut().zip(matrix.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for i in 0..matrix.n_rows() {
            for ((s, v), m) in var.iter_mut().zip(matrix.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Standardizer { mean, std }
    }

    /// Zero-variance features map to 0.
    pub fn transform_row(&self, row: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = if self.std[j] > 0.0 {
                (row[j] - self.mean[j]) / self.std[j]
            } else {
                0.0
            };
        }
    }

    pub fn transform(&self, matrix: &FeatureMatrix) -> Vec<f64> {
        let p = matrix.n_cols();
        let mut out = vec![0.0; matrix.n_rows() * p];
        for i in 0..matrix.n_rows() {
            self.transform_row(matrix.row(i), &mut out[i * p..(i + 1) * p]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    Knn {
        k: usize,
        /// Standardized training rows, row-major.
        rows: Vec<f64>,
        labels: Vec<f64>,
    },
    Forest {
        trees: Vec<DecisionTree>,
    },
    Boost {
        trees: Vec<DecisionTree>,
        alphas: Vec<f64>,
        /// Weighted training error of each kept round.
        errors: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub family: ModelFamily,
    pub target: Target,
    pub features: Vec<String>,
    pub standardizer: Standardizer,
    pub params: ModelParams,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean log-loss plus `l2 / 2 · ‖w‖²` and its gradient in `(w, b)`.
/// `x` is row-major with `w.len()` columns.
pub fn logistic_loss_grad(x: &[f64], y: &[f64], w: &[f64], b: f64, l2: f64) -> (f64, Vec<f64>, f64) {
    let p = w.len();
    let n = y.len();
    let mut grad = vec![0.0; p];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for i in 0..n {
        let row = &x[i * p..(i + 1) * p];
        let z = dot(row, w) + b;
        loss += softplus(z) - y[i] * z;
        let r = sigmoid(z) - y[i];
        for (g, v) in grad.iter_mut().zip(row) {
            *g += r * v;
        }
        grad_b += r;
    }
    let nf = n as f64;
    loss = loss / nf + 0.5 * l2 * dot(w, w);
    for (g, wj) in grad.iter_mut().zip(w) {
        *g = *g / nf + l2 * wj;
    }
    (loss, grad, grad_b / nf)
}

/// Full-batch gradient descent; returns weights, bias and the loss before each step.
pub fn fit_logistic(
    x: &[f64],
    y: &[f64],
    p: usize,
    learning_rate: f64,
    l2: f64,
    epochs: usize,
) -> (Vec<f64>, f64, Vec<f64>) {
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, g, gb) = logistic_loss_grad(x, y, &w, b, l2);
        losses.push(loss);
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= learning_rate * gj;
        }
        b -= learning_rate * gb;
    }
    (w, b, losses)
}

fn fit_svm(x: &[f64], y: &[f64], p: usize, spec: &ModelSpec) -> (Vec<f64>, f64) {
    let lambda = spec.get("lambda");
    let eta0 = spec.get("eta0");
    let epochs = spec.get_usize("epochs");
    let n = y.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut t = 0u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = eta0 / (1.0 + eta0 * lambda * t as f64);
            let yi = if y[i] > 0.5 { 1.0 } else { -1.0 };
            let row = &x[i * p..(i + 1) * p];
            let margin = yi * (dot(row, &w) + b);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(row) {
                    *wj += eta * yi * xj;
                }
                b += eta * yi;
            }
        }
    }
    (w, b)
}

fn fit_ridge(x: &[f64], y: &[f64], p: usize, ridge: f64) -> Result<(Vec<f64>, f64)> {
    let n = y.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    if p == 0 {
        return Ok((vec![], y_mean));
    }
    let xm = DMatrix::from_row_slice(n, p, x);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = xm.transpose() * &xm;
    let reg = ridge * n as f64 + 1e-12;
    for j in 0..p {
        gram[(j, j)] += reg;
    }
    let rhs = xm.transpose() * yc;
    let sol = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Invariant("singular ridge system".into()))?,
    };
    Ok((sol.iter().copied().collect(), y_mean))
}

fn tree_params(spec: &ModelSpec, task: TreeTask) -> TreeParams {
    match spec.family {
        ModelFamily::AdaBoost => TreeParams {
            task: TreeTask::Classification,
            max_depth: Some(spec.get_usize("max_depth")),
            max_features: MaxFeatures::All,
            min_samples_split: 2,
        },
        _ => {
            let depth = spec.get_usize("max_depth");
            let mf = spec.get_usize("max_features");
            TreeParams {
                task,
                max_depth: (depth > 0).then_some(depth),
                max_features: if mf == 0 {
                    MaxFeatures::Sqrt
                } else {
                    MaxFeatures::Count(mf)
                },
                min_samples_split: 2,
            }
        }
    }
}

fn fit_forest(matrix: &FeatureMatrix, y: &[f64], spec: &ModelSpec, task: TreeTask) -> Vec<DecisionTree> {
    let n = matrix.n_rows();
    let data = BinnedData::from_rows(matrix.values(), n, matrix.n_cols(), MAX_BINS);
    let params = tree_params(spec, task);
    let bootstrap = spec.get("bootstrap") > 0.5;
    (0..spec.get_usize("n_trees"))
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, t as u64));
            let weights = if bootstrap {
                let mut w = vec![0.0; n];
                for _ in 0..n {
                    w[rng.gen_range(0..n)] += 1.0;
                }
                w
            } else {
                vec![1.0; n]
            };
            fit_tree(&data, y, &weights, &params, &mut rng).tree
        })
        .collect()
}

/// Discrete two-class AdaBoost (SAMME with K = 2).
fn fit_adaboost(matrix: &FeatureMatrix, y: &[f64], spec: &ModelSpec) -> ModelParams {
    let n = matrix.n_rows();
    let data = BinnedData::from_rows(matrix.values(), n, matrix.n_cols(), MAX_BINS);
    let params = tree_params(spec, TreeTask::Classification);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut w = vec![1.0 / n as f64; n];
    let (mut trees, mut alphas, mut errors) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..spec.get_usize("rounds") {
        let tree = fit_tree(&data, y, &w, &params, &mut rng).tree;
        let wrong: Vec<bool> = (0..n)
            .map(|i| tree.vote(matrix.row(i)) != (y[i] > 0.5))
            .collect();
        let total: f64 = w.iter().sum();
        let err = wrong
            .iter()
            .zip(&w)
            .filter(|(m, _)| **m)
            .map(|(_, wi)| wi)
            .sum::<f64>()
            / total;
        if err >= 0.5 {
            break;
        }
        if err <= 1e-12 {
            // A perfect learner: keep it with a capped weight and stop.
            trees.push(tree);
            alphas.push(((1.0 - 1e-12) / 1e-12f64).ln());
            errors.push(err);
            break;
        }
        let alpha = ((1.0 - err) / err).ln();
        for (wi, &m) in w.iter_mut().zip(&wrong) {
            if m {
                *wi *= alpha.exp();
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        trees.push(tree);
        alphas.push(alpha);
        errors.push(err);
    }
    ModelParams::Boost {
        trees,
        alphas,
        errors,
    }
}

fn check_training_input(matrix: &FeatureMatrix, labels: &LabelSet, target: Target, family: ModelFamily) -> Result<()> {
    labels.check_aligned(matrix.row_ids())?;
    matrix.check_finite()?;
    if matrix.n_rows() < 2 {
        return Err(Error::Data("training needs at least two rows".into()));
    }
    if target == Target::Continuous
        && !matches!(family, ModelFamily::LinReg | ModelFamily::RandomForest)
    {
        return Err(Error::Config(format!(
            "{family} does not support a continuous target"
        )));
    }
    if target == Target::Binary {
        if !labels.churned.iter().any(|&c| c) {
            return Err(Error::EmptyClass("churner"));
        }
        if labels.churned.iter().all(|&c| c) {
            return Err(Error::EmptyClass("non-churner"));
        }
    }
    Ok(())
}

pub fn train(spec: &ModelSpec, matrix: &FeatureMatrix, labels: &LabelSet, target: Target) -> Result<TrainedModel> {
    spec.validate()?;
    check_training_input(matrix, labels, target, spec.family)?;
    let y: Vec<f64> = match target {
        Target::Binary => labels.churned.iter().map(|&c| c as u8 as f64).collect(),
        Target::Continuous => labels.pct_inactive_eval.clone(),
    };
    let p = matrix.n_cols();
    let standardizer = Standardizer::fit(matrix);
    let params = match spec.family {
        ModelFamily::LogReg => {
            let x = standardizer.transform(matrix);
            let (weights, bias, _) = fit_logistic(
                &x,
                &y,
                p,
                spec.get("learning_rate"),
                spec.get("l2"),
                spec.get_usize("epochs"),
            );
            ModelParams::Linear { weights, bias }
        }
        ModelFamily::LinearSvm => {
            let x = standardizer.transform(matrix);
            let (weights, bias) = fit_svm(&x, &y, p, spec);
            ModelParams::Linear { weights, bias }
        }
        ModelFamily::LinReg => {
            let x = standardizer.transform(matrix);
            let (weights, bias) = fit_ridge(&x, &y, p, spec.get("ridge"))?;
            ModelParams::Linear { weights, bias }
        }
        ModelFamily::Knn => ModelParams::Knn {
            k: spec.get_usize("k").min(matrix.n_rows()),
            rows: standardizer.transform(matrix),
            labels: y,
        },
        ModelFamily::RandomForest => {
            let task = match target {
                Target::Binary => TreeTask::Classification,
                Target::Continuous => TreeTask::Regression,
            };
            ModelParams::Forest {
                trees: fit_forest(matrix, &y, spec, task),
            }
        }
        ModelFamily::AdaBoost => fit_adaboost(matrix, &y, spec),
    };
    Ok(TrainedModel {
        family: spec.family,
        target,
        features: matrix.columns().to_vec(),
        standardizer,
        params,
    })
}

impl TrainedModel {
    fn score_row(&self, raw: &[f64], z: &mut [f64]) -> f64 {
        match &self.params {
            ModelParams::Linear { weights, bias } => {
                self.standardizer.transform_row(raw, z);
                let s = dot(z, weights) + bias;
                match self.family {
                    ModelFamily::LinReg => s.clamp(0.0, 1.0),
                    _ => sigmoid(s),
                }
            }
            ModelParams::Knn { k, rows, labels } => {
                self.standardizer.transform_row(raw, z);
                let p = z.len();
                let mut d: Vec<(f64, usize)> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let r = &rows[i * p..(i + 1) * p];
                        (r.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum(), i)
                    })
                    .collect();
                let k = (*k).min(d.len()).max(1);
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if k < d.len() {
                    d.select_nth_unstable_by(k - 1, cmp);
                }
                d[..k].iter().map(|&(_, i)| labels[i]).sum::<f64>() / k as f64
            }
            ModelParams::Forest { trees } => {
                if trees.is_empty() {
                    return 0.5;
                }
                let s: f64 = match self.target {
                    Target::Binary => trees.iter().map(|t| t.vote(raw) as u8 as f64).sum(),
                    Target::Continuous => trees.iter().map(|t| t.predict(raw)).sum(),
                };
                (s / trees.len() as f64).clamp(0.0, 1.0)
            }
            ModelParams::Boost { trees, alphas, .. } => {
                let f: f64 = trees
                    .iter()
                    .zip(alphas)
                    .map(|(t, a)| if t.vote(raw) { *a } else { -*a })
                    .sum();
                sigmoid(2.0 * f)
            }
        }
    }

    /// Churn Score per matrix row.
    pub fn predict_scores(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        let cols = matrix.columns();
        for (i, expected) in self.features.iter().enumerate() {
            match cols.get(i) {
                Some(found) if found == expected => {}
                found => {
                    return Err(Error::ColumnMismatch {
                        index: i,
                        expected: expected.clone(),
                        found: found.cloned().unwrap_or_else(|| "<missing>".into()),
                    })
                }
            }
        }
        if cols.len() > self.features.len() {
            let i = self.features.len();
            return Err(Error::ColumnMismatch {
                index: i,
                expected: "<end of feature list>".into(),
                found: cols[i].clone(),
            });
        }
        matrix.check_finite()?;
        let p = self.features.len();
        let scores: Vec<f64> = (0..matrix.n_rows())
            .into_par_iter()
            .map_init(|| vec![0.0; p], |z, i| self.score_row(matrix.row(i), z))
            .collect();
        if let Some(bad) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Invariant(format!(
                "{} produced score {} for row {bad}",
                self.family, scores[bad]
            )));
        }
        Ok(scores)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"CFMD";
const MODEL_VERSION: u32 = 1;

struct ByteWriter<W: Write>(W);

impl<W: Write> ByteWriter<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> std::io::Result<()> {
        v.iter().try_for_each(|x| self.0.write_all(&x.to_le_bytes()))
    }
    fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.0.write_all(s.as_bytes())
    }
    fn trees(&mut self, trees: &[DecisionTree]) -> std::io::Result<()> {
        self.u32(trees.len() as u32)?;
        for t in trees {
            self.u32(t.nodes.len() as u32)?;
            for node in &t.nodes {
                match *node {
                    Node::Leaf { value } => {
                        self.u8(0)?;
                        self.f64s(&[value])?;
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        self.u8(1)?;
                        self.u32(feature)?;
                        self.f64s(&[threshold])?;
                        self.u32(left)?;
                        self.u32(right)?;
                    }
                }
            }
        }
        Ok(())
    }
}

struct ByteReader<R: Read>(R);

fn truncated() -> Error {
    Error::Data("model artifact truncated or corrupt".into())
}

impl<R: Read> ByteReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|_| truncated())?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf).map_err(|_| truncated())?;
        String::from_utf8(buf).map_err(|_| truncated())
    }
    fn trees(&mut self, p: usize) -> Result<Vec<DecisionTree>> {
        let n = self.u32()? as usize;
        let mut trees = Vec::with_capacity(n);
        for _ in 0..n {
            let m = self.u32()? as usize;
            let mut nodes = Vec::with_capacity(m);
            for _ in 0..m {
                nodes.push(match self.u8()? {
                    0 => Node::Leaf { value: self.f64()? },
                    1 => {
                        let feature = self.u32()?;
                        let threshold = self.f64()?;
                        let (left, right) = (self.u32()?, self.u32()?);
                        if feature as usize >= p || left as usize >= m || right as usize >= m {
                            return Err(truncated());
                        }
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        }
                    }
                    _ => return Err(truncated()),
                });
            }
            trees.push(DecisionTree { nodes });
        }
        Ok(trees)
    }
}

impl TrainedModel {
    /// Versioned binary artifact: magic, version, family and target tags,
    /// feature names, standardization constants, then the parameter block.
    pub fn write_to<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = ByteWriter(std::io::BufWriter::new(out));
        w.0.write_all(MODEL_MAGIC)?;
        w.u32(MODEL_VERSION)?;
        w.u8(self.family.tag())?;
        w.u8(match self.target {
            Target::Binary => 0,
            Target::Continuous => 1,
        })?;
        w.u32(self.features.len() as u32)?;
        for f in &self.features {
            w.str(f)?;
        }
        w.f64s(&self.standardizer.mean)?;
        w.f64s(&self.standardizer.std)?;
        match &self.params {
            ModelParams::Linear { weights, bias } => {
                w.f64s(&[*bias])?;
                w.f64s(weights)?;
            }
            ModelParams::Knn { k, rows, labels } => {
                w.u32(*k as u32)?;
                w.u64(labels.len() as u64)?;
                w.f64s(rows)?;
                w.f64s(labels)?;
            }
            ModelParams::Forest { trees } => w.trees(trees)?,
            ModelParams::Boost {
                trees,
                alphas,
                errors,
            } => {
                w.u32(alphas.len() as u32)?;
                w.f64s(alphas)?;
                w.f64s(errors)?;
                w.trees(trees)?;
            }
        }
        w.0.flush()
    }

    pub fn read_from<R: Read>(input: R) -> Result<TrainedModel> {
        let mut r = ByteReader(std::io::BufReader::new(input));
        if &r.bytes::<4>()? != MODEL_MAGIC {
            return Err(Error::Data("not a model artifact (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Data(format!("unsupported model version {version}")));
        }
        let family = ModelFamily::from_tag(r.u8()?).ok_or_else(truncated)?;
        let target = match r.u8()? {
            0 => Target::Binary,
            1 => Target::Continuous,
            _ => return Err(truncated()),
        };
        let p = r.u32()? as usize;
        let features = (0..p).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let standardizer = Standardizer {
            mean: r.f64s(p)?,
            std: r.f64s(p)?,
        };
        let params = match family {
            ModelFamily::LinReg | ModelFamily::LogReg | ModelFamily::LinearSvm => {
                let bias = r.f64()?;
                ModelParams::Linear {
                    weights: r.f64s(p)?,
                    bias,
                }
            }
            ModelFamily::Knn => {
                let k = r.u32()? as usize;
                let n = r.u64()? as usize;
                ModelParams::Knn {
                    k,
                    rows: r.f64s(n * p)?,
                    labels: r.f64s(n)?,
                }
            }
            ModelFamily::RandomForest => ModelParams::Forest { trees: r.trees(p)? },
            ModelFamily::AdaBoost => {
                let m = r.u32()? as usize;
                let alphas = r.f64s(m)?;
                let errors = r.f64s(m)?;
                let trees = r.trees(p)?;
                if trees.len() != m {
                    return Err(truncated());
                }
                ModelParams::Boost {
                    trees,
                    alphas,
                    errors,
                }
            }
        };
        Ok(TrainedModel {
            family,
            target,
            features,
            standardizer,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Absent when the held-out fold holds a single class.
    pub auc: Option<f64>,
    /// Mean |score − evaluation inactivity|, for continuous targets.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Training part held a single class; excluded from the means.
    pub flagged: bool,
    pub metrics: Option<FoldMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub family: ModelFamily,
    pub target: Target,
    pub k: usize,
    pub seed: u64,
    pub hyperparameters: BTreeMap<String, f64>,
    pub folds: Vec<FoldReport>,
    pub mean: Option<FoldMetrics>,
    /// Fold index of every row, in matrix order.
    #[serde(skip)]
    pub assignment: Vec<usize>,
    /// Held-out score of every row; `None` in flagged folds.
    #[serde(skip)]
    pub oof_scores: Vec<Option<f64>>,
}

/// Shuffle rows by `seed` and cut them into `k` folds whose sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("fold count {k} must lie in 2..={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    let (base, extra) = (n / k, n % k);
    let mut pos = 0;
    for fold in 0..k {
        let size = base + (fold < extra) as usize;
        for &row in &perm[pos..pos + size] {
            assignment[row] = fold;
        }
        pos += size;
    }
    Ok(assignment)
}

/// A fold report with the held-out `(row, score)` pairs.
type ScoredFold = (FoldReport, Vec<(usize, f64)>);

pub fn kfold_cv(
    spec: &ModelSpec,
    matrix: &FeatureMatrix,
    labels: &LabelSet,
    target: Target,
    k: usize,
    seed: u64,
) -> Result<CvReport> {
    spec.validate()?;
    labels.check_aligned(matrix.row_ids())?;
    let n = matrix.n_rows();
    let assignment = fold_assignment(n, k, seed)?;

    let folds: Vec<Result<ScoredFold>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
            let train_rows: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
            let train_labels = labels.select(&train_rows);
            let one_class = train_labels.churned.iter().all(|&c| c)
                || !train_labels.churned.iter().any(|&c| c);
            let mut report = FoldReport {
                fold,
                n_train: train_rows.len(),
                n_test: test.len(),
                flagged: target == Target::Binary && one_class,
                metrics: None,
            };
            if report.flagged {
                return Ok((report, Vec::new()));
            }
            let fold_spec = ModelSpec {
                seed: sub_seed(spec.seed, fold as u64),
                ..spec.clone()
            };
            let model = train(&fold_spec, &matrix.select_rows(&train_rows), &train_labels, target)?;
            let scores = model.predict_scores(&matrix.select_rows(&test))?;
            let test_labels = labels.select(&test);
            let m = classification_metrics(&scores, &test_labels.churned, 0.5)?;
            let auc = roc_auc(&scores, &test_labels.churned).ok().map(|r| r.1);
            let mae = (target == Target::Continuous).then(|| {
                scores
                    .iter()
                    .zip(&test_labels.pct_inactive_eval)
                    .map(|(s, a)| (s - a).abs())
                    .sum::<f64>()
                    / scores.len() as f64
            });
            report.metrics = Some(FoldMetrics {
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f_score: m.f_score,
                auc,
                mae,
            });
            Ok((report, test.into_iter().zip(scores).collect()))
        })
        .collect();

    let mut reports = Vec::with_capacity(k);
    let mut oof_scores = vec![None; n];
    for f in folds {
        let (report, scored) = f?;
        for (i, s) in scored {
            oof_scores[i] = Some(s);
        }
        reports.push(report);
    }
    let mean = mean_metrics(&reports);
    Ok(CvReport {
        family: spec.family,
        target,
        k,
        seed,
        hyperparameters: spec.hyperparameters.clone(),
        folds: reports,
        mean,
        assignment,
        oof_scores,
    })
}

fn mean_metrics(folds: &[FoldReport]) -> Option<FoldMetrics> {
    let ms: Vec<&FoldMetrics> = folds.iter().filter_map(|f| f.metrics.as_ref()).collect();
    if ms.is_empty() {
        return None;
    }
    let avg = |f: &dyn Fn(&FoldMetrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / ms.len() as f64;
    let opt_avg = |f: &dyn Fn(&FoldMetrics) -> Option<f64>| {
        let v: Vec<f64> = ms.iter().filter_map(|m| f(m)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(FoldMetrics {
        accuracy: avg(&|m| m.accuracy),
        precision: avg(&|m| m.precision),
        recall: avg(&|m| m.recall),
        f_score: avg(&|m| m.f_score),
        auc: opt_avg(&|m| m.auc),
        mae: opt_avg(&|m| m.mae),
    })
}

/// Offset of the sentinel thresholds below 0 and above 1.
pub const THRESHOLD_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineResult {
    pub threshold: f64,
    pub accuracy: f64,
    /// `(threshold, accuracy)` for every candidate, ascending.
    pub curve: Vec<(f64, f64)>,
}

/// Classify churner iff training inactivity exceeds a threshold; sweep every
/// midpoint between consecutive distinct values plus both sentinels and keep
/// the most accurate (smallest on ties).
pub fn threshold_baseline(inactivity: &[f64], churned: &[bool]) -> Result<BaselineResult> {
    if inactivity.is_empty() {
        return Err(Error::Data("baseline needs at least one subscriber".into()));
    }
    if inactivity.len() != churned.len() {
        return Err(Error::Data("inactivity and labels differ in length".into()));
    }
    if let Some(v) = inactivity.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("inactivity value {v} outside [0, 1]")));
    }
    let n = inactivity.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| inactivity[a].total_cmp(&inactivity[b]));

    // Below every value, all rows are called churners.
    let total_pos = churned.iter().filter(|&&c| c).count();
    let mut correct = total_pos;
    let mut curve = vec![(-THRESHOLD_EPSILON, correct as f64 / n as f64)];
    let mut i = 0;
    while i < n {
        let v = inactivity[order[i]];
        while i < n && inactivity[order[i]] == v {
            // This row is now at or below the threshold: predicted non-churner.
            if churned[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let t = if i < n {
            (v + inactivity[order[i]]) / 2.0
        } else {
            1.0 + THRESHOLD_EPSILON
        };
        curve.push((t, correct as f64 / n as f64));
    }
    let (threshold, accuracy) = curve
        .iter()
        .copied()
        .fold((f64::NAN, -1.0), |best, c| if c.1 > best.1 { c } else { best });
    Ok(BaselineResult {
        threshold,
        accuracy,
        curve,
    })
}

/// Accuracy of always predicting the larger class.
pub fn majority_accuracy(churned: &[bool]) -> f64 {
    let pos = churned.iter().filter(|&&c| c).count();
    pos.max(churned.len() - pos) as f64 / churned.len().max(1) as f64
}
