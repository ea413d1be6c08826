//! Feature ranking: univariate Welch t-test and R², and joint selection by
//! bagged-tree impurity importance.

use std::borrow::Cow;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labeling::LabelSet;
use crate::matrix::FeatureMatrix;
use crate::simgen::sub_seed;
use crate::tree::{fit_tree, BinnedData, MaxFeatures, TreeParams, TreeTask, MAX_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    TStatAbs,
    RSquared,
    TreeImportance,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::TStatAbs => "t_stat_abs",
            ScoreKind::RSquared => "r_squared",
            ScoreKind::TreeImportance => "tree_importance",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "t_stat_abs" => Some(ScoreKind::TStatAbs),
            "r_squared" => Some(ScoreKind::RSquared),
            "tree_importance" => Some(ScoreKind::TreeImportance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankFlag {
    /// Zero variance and equal means in both groups; scored 0.
    Degenerate,
    /// Zero variance in both groups but different means; scored +∞.
    PerfectSeparation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedFeature {
    pub name: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    pub flag: Option<RankFlag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRanking {
    pub score_kind: ScoreKind,
    pub entries: Vec<RankedFeature>,
}

impl FeatureRanking {
    /// Sort by score descending, ties by name ascending, and assign ranks.
    fn build(score_kind: ScoreKind, scored: Vec<(String, f64, Option<RankFlag>)>) -> Self {
        let mut scored = scored;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (name, score, flag))| RankedFeature {
                name,
                score,
                rank: i + 1,
                flag,
            })
            .collect();
        FeatureRanking {
            score_kind,
            entries,
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn top(&self, k: usize) -> FeatureRanking {
        FeatureRanking {
            score_kind: self.score_kind,
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }

    pub fn score_of(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.score)
    }

    pub fn rank_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.rank)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "rank,feature,score,score_kind")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{}", e.rank, e.name, e.score, self.score_kind.as_str())?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<FeatureRanking> {
        let mut lines = BufReader::new(input).lines();
        match lines.next() {
            Some(Ok(h)) if h == "rank,feature,score,score_kind" => {}
            _ => return Err(Error::Data("bad ranking header".into())),
        }
        let mut kind = None;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Data(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("ranking line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let k = ScoreKind::parse(f[3]).ok_or_else(bad)?;
            if *kind.get_or_insert(k) != k {
                return Err(bad());
            }
            entries.push(RankedFeature {
                rank: f[0].parse().map_err(|_| bad())?,
                name: f[1].to_string(),
                score: f[2].parse().map_err(|_| bad())?,
                flag: None,
            });
        }
        Ok(FeatureRanking {
            score_kind: kind.unwrap_or(ScoreKind::TreeImportance),
            entries,
        })
    }
}

/// Rows reordered by ego id so every ranking is independent of input row
/// order. Borrows when the rows are already sorted.
fn canonical<'a>(
    matrix: &'a FeatureMatrix,
    labels: &'a LabelSet,
) -> Result<(Cow<'a, FeatureMatrix>, Cow<'a, LabelSet>)> {
    labels.check_aligned(matrix.row_ids())?;
    let ids = matrix.row_ids();
    if ids.windows(2).all(|w| w[0] <= w[1]) {
        return Ok((Cow::Borrowed(matrix), Cow::Borrowed(labels)));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    Ok((
        Cow::Owned(matrix.select_rows(&order)),
        Cow::Owned(labels.select(&order)),
    ))
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (usize, f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0, 0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = if n < 2 {
        0.0
    } else {
        xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    (n, mean, var)
}

/// Welch two-sample t statistic (churners minus non-churners) and its flag.
pub fn welch_t(churners: &[f64], others: &[f64]) -> (f64, Option<RankFlag>) {
    let (n1, m1, v1) = mean_var(churners.iter().copied());
    let (n0, m0, v0) = mean_var(others.iter().copied());
    let se2 = v1 / n1 as f64 + v0 / n0 as f64;
    if se2 <= 0.0 {
        return if m1 == m0 {
            (0.0, Some(RankFlag::Degenerate))
        } else {
            (
                if m1 > m0 { f64::INFINITY } else { f64::NEG_INFINITY },
                Some(RankFlag::PerfectSeparation),
            )
        };
    }
    ((m1 - m0) / se2.sqrt(), None)
}

/// Rank every feature by |Welch t| between churners and non-churners.
pub fn univariate_ttest(matrix: &FeatureMatrix, labels: &LabelSet) -> Result<FeatureRanking> {
    let (matrix, labels) = canonical(matrix, labels)?;
    if !labels.churned.iter().any(|&c| c) {
        return Err(Error::EmptyClass("churner"));
    }
    if labels.churned.iter().all(|&c| c) {
        return Err(Error::EmptyClass("non-churner"));
    }
    let scored = (0..matrix.n_cols())
        .into_par_iter()
        .map(|j| {
            let col = matrix.column(j);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (v, &c) in col.into_iter().zip(&labels.churned) {
                if c {
                    pos.push(v)
                } else {
                    neg.push(v)
                }
            }
            let (t, flag) = welch_t(&pos, &neg);
            (matrix.columns()[j].clone(), t.abs(), flag)
        })
        .collect();
    Ok(FeatureRanking::build(ScoreKind::TStatAbs, scored))
}

/// R² of the least-squares line of `y` on `x`; 0 for a constant feature or target.
pub fn simple_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (b - (intercept + slope * a)).powi(2))
        .sum();
    (1.0 - ss_res / syy).clamp(0.0, 1.0)
}

/// Rank every feature by the R² of regressing evaluation inactivity on it.
pub fn univariate_r2(matrix: &FeatureMatrix, labels: &LabelSet) -> Result<FeatureRanking> {
    let (matrix, labels) = canonical(matrix, labels)?;
    let y = &labels.pct_inactive_eval;
    let scored = (0..matrix.n_cols())
        .into_par_iter()
        .map(|j| {
            let col = matrix.column(j);
            let r2 = simple_r2(&col, y);
            let flag = (r2 == 0.0 && col.iter().all(|&v| v == col[0])).then_some(RankFlag::Degenerate);
            (matrix.columns()[j].clone(), r2, flag)
        })
        .collect();
    Ok(FeatureRanking::build(ScoreKind::RSquared, scored))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeSelectConfig {
    pub n_trees: usize,
    pub k: usize,
    pub max_depth: usize,
    /// Per-split feature sample; √p by default.
    pub max_features: MaxFeatures,
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for TreeSelectConfig {
    fn default() -> Self {
        TreeSelectConfig {
            n_trees: 100,
            k: 100,
            max_depth: 12,
            max_features: MaxFeatures::Sqrt,
            max_bins: MAX_BINS,
            seed: 42,
        }
    }
}

/// Bagged-tree mean decrease in Gini impurity, normalized to sum to one,
/// for every feature.
pub fn tree_importance(
    matrix: &FeatureMatrix,
    labels: &LabelSet,
    config: &TreeSelectConfig,
) -> Result<FeatureRanking> {
    let (matrix, labels) = canonical(matrix, labels)?;
    if config.n_trees == 0 {
        return Err(Error::Config("tree selection needs at least one tree".into()));
    }
    let positives = labels.churned.iter().filter(|&&c| c).count();
    if positives == 0 {
        return Err(Error::EmptyClass("churner"));
    }
    if positives == labels.len() {
        return Err(Error::EmptyClass("non-churner"));
    }
    let n = matrix.n_rows();
    let p = matrix.n_cols();
    let data = BinnedData::from_rows(matrix.values(), n, p, config.max_bins);
    let targets: Vec<f64> = labels.churned.iter().map(|&c| c as u8 as f64).collect();
    let params = TreeParams {
        task: TreeTask::Classification,
        max_depth: Some(config.max_depth),
        max_features: config.max_features,
        min_samples_split: 2,
    };

    let per_tree: Vec<Vec<f64>> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, t as u64));
            let mut weights = vec![0.0; n];
            for _ in 0..n {
                weights[rng.gen_range(0..n)] += 1.0;
            }
            let fitted = fit_tree(&data, &targets, &weights, &params, &mut rng);
            let total: f64 = fitted.importance.iter().sum();
            if total > 0.0 {
                fitted.importance.iter().map(|v| v / total).collect()
            } else {
                Vec::new()
            }
        })
        .collect();

    let mut importance = vec![0.0; p];
    let mut contributing = 0usize;
    for imp in per_tree.iter().filter(|v| !v.is_empty()) {
        contributing += 1;
        for (a, b) in importance.iter_mut().zip(imp) {
            *a += b;
        }
    }
    if contributing == 0 {
        return Err(Error::Data(
            "no informative split found: every feature is constant".into(),
        ));
    }
    let total: f64 = importance.iter().sum();
    let scored = matrix
        .columns()
        .iter()
        .zip(importance)
        .map(|(name, v)| (name.clone(), v / total, None))
        .collect();
    Ok(FeatureRanking::build(ScoreKind::TreeImportance, scored))
}

/// The `k` most important features under [`tree_importance`].
pub fn tree_select(
    matrix: &FeatureMatrix,
    labels: &LabelSet,
    config: &TreeSelectConfig,
) -> Result<FeatureRanking> {
    if config.k == 0 || config.k > matrix.n_cols() {
        return Err(Error::Config(format!(
            "k = {} must lie in 1..={}",
            config.k,
            matrix.n_cols()
        )));
    }
    Ok(tree_importance(matrix, labels, config)?.top(config.k))
}
