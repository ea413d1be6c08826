//! Histogram-based CART trees shared by feature selection and the tree models.
//!
//! Columns are quantized once into at most 256 ordered bins. When a column has
//! no more distinct values than bins, every distinct value gets its own bin
//! and split search is exact. Split thresholds are stored as raw feature
//! values, so fitted trees score unbinned rows directly.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

pub const MAX_BINS: usize = 256;

/// Column-major bin codes plus the bin edges of every column.
#[derive(Debug, Clone)]
pub struct BinnedData {
    n_rows: usize,
    codes: Vec<u8>,
    edges: Vec<Vec<f64>>,
}

fn column_edges(mut values: Vec<f64>, max_bins: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.total_cmp(b));
    let cut = |a: f64, b: f64| {
        let mid = a + (b - a) * 0.5;
        if mid < b {
            mid
        } else {
            a
        }
    };
    let mut distinct = values.clone();
    distinct.dedup();
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| cut(w[0], w[1])).collect();
    }
    let n = values.len();
    let mut edges: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for q in 1..max_bins {
        let i = q * n / max_bins;
        if i == 0 || i >= n || values[i - 1] == values[i] {
            continue;
        }
        let e = cut(values[i - 1], values[i]);
        if edges.last().is_none_or(|&last| e > last) {
            edges.push(e);
        }
    }
    edges
}

impl BinnedData {
    /// Bin a row-major `n_rows × n_cols` block.
    pub fn from_rows(values: &[f64], n_rows: usize, n_cols: usize, max_bins: usize) -> Self {
        assert_eq!(values.len(), n_rows * n_cols);
        let max_bins = max_bins.clamp(2, MAX_BINS);
        let per_column: Vec<(Vec<f64>, Vec<u8>)> = (0..n_cols)
            .into_par_iter()
            .map(|j| {
                let col: Vec<f64> = (0..n_rows).map(|i| values[i * n_cols + j]).collect();
                let edges = column_edges(col.clone(), max_bins);
                let codes = col
                    .iter()
                    .map(|&x| edges.partition_point(|&e| e < x) as u8)
                    .collect();
                (edges, codes)
            })
            .collect();
        let mut codes = Vec::with_capacity(n_rows * n_cols);
        let mut edges = Vec::with_capacity(n_cols);
        for (e, c) in per_column {
            codes.extend_from_slice(&c);
            edges.push(e);
        }
        BinnedData {
            n_rows,
            codes,
            edges,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.edges.len()
    }

    fn column(&self, f: usize) -> &[u8] {
        &self.codes[f * self.n_rows..(f + 1) * self.n_rows]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeTask {
    /// Binary targets in {0, 1}; Gini impurity.
    Classification,
    /// Real targets; squared error.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxFeatures {
    All,
    Sqrt,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, p: usize) -> usize {
        match self {
            MaxFeatures::All => p,
            MaxFeatures::Sqrt => ((p as f64).sqrt().round() as usize).clamp(1, p.max(1)),
            MaxFeatures::Count(k) => k.clamp(1, p.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub task: TreeTask,
    /// `None` grows until leaves are pure or unsplittable.
    pub max_depth: Option<usize>,
    pub max_features: MaxFeatures,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            task: TreeTask::Classification,
            max_depth: None,
            max_features: MaxFeatures::All,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// Positive-class fraction (classification) or mean target (regression).
    Leaf { value: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    /// Hard class vote: positive iff the leaf fraction exceeds one half.
    pub fn vote(&self, row: &[f64]) -> bool {
        self.predict(row) > 0.5
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(nodes, left as usize).max(go(nodes, right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone)]
pub struct FittedTree {
    pub tree: DecisionTree,
    /// Total impurity decrease credited to each feature.
    pub importance: Vec<f64>,
}

#[derive(Clone, Copy, Default)]
struct Stats {
    count: usize,
    w: f64,
    wy: f64,
    wyy: f64,
}

impl Stats {
    fn add(&mut self, w: f64, y: f64) {
        self.count += 1;
        self.w += w;
        self.wy += w * y;
        self.wyy += w * y * y;
    }

    fn minus(&self, o: &Stats) -> Stats {
        Stats {
            count: self.count - o.count,
            w: self.w - o.w,
            wy: self.wy - o.wy,
            wyy: self.wyy - o.wyy,
        }
    }

    /// Weight-scaled impurity.
    fn impurity(&self, task: TreeTask) -> f64 {
        if self.w <= 0.0 {
            return 0.0;
        }
        let v = match task {
            TreeTask::Classification => {
                let p = (self.wy / self.w).clamp(0.0, 1.0);
                2.0 * self.w * p * (1.0 - p)
            }
            TreeTask::Regression => self.wyy - self.wy * self.wy / self.w,
        };
        v.max(0.0)
    }

    fn value(&self) -> f64 {
        if self.w > 0.0 {
            self.wy / self.w
        } else {
            0.0
        }
    }
}

struct Candidate {
    gain: f64,
    feature: usize,
    bin: usize,
}

/// Fit one tree on the rows with positive weight.
///
/// `targets` and `weights` are indexed by binned row. Features considered at
/// each node are drawn from `rng` when `max_features` is below the column count.
pub fn fit_tree<R: Rng>(
    data: &BinnedData,
    targets: &[f64],
    weights: &[f64],
    params: &TreeParams,
    rng: &mut R,
) -> FittedTree {
    let n = data.n_rows();
    let p = data.n_features();
    assert_eq!(targets.len(), n);
    assert_eq!(weights.len(), n);
    let task = params.task;
    let mtry = params.max_features.resolve(p);
    let mut rows: Vec<u32> = (0..n as u32).filter(|&i| weights[i as usize] > 0.0).collect();
    let mut importance = vec![0.0; p];
    let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
    let mut hist = vec![Stats::default(); MAX_BINS];
    let mut features: Vec<usize> = (0..p).collect();
    // (node index, row range, depth)
    let mut stack = vec![(0usize, 0usize, rows.len(), 0usize)];

    while let Some((node, lo, hi, depth)) = stack.pop() {
        let mut total = Stats::default();
        for &r in &rows[lo..hi] {
            total.add(weights[r as usize], targets[r as usize]);
        }
        nodes[node] = Node::Leaf {
            value: total.value(),
        };
        let parent_imp = total.impurity(task);
        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || hi - lo < params.min_samples_split.max(2) || parent_imp <= 1e-12 * total.w.max(1.0) {
            continue;
        }

        if mtry < p {
            features.clear();
            features.extend(index::sample(rng, p, mtry));
        }
        let mut best: Option<Candidate> = None;
        for &f in &features {
            let nb = data.edges[f].len() + 1;
            if nb < 2 {
                continue;
            }
            let col = data.column(f);
            hist[..nb].iter_mut().for_each(|h| *h = Stats::default());
            for &r in &rows[lo..hi] {
                hist[col[r as usize] as usize].add(weights[r as usize], targets[r as usize]);
            }
            let mut left = Stats::default();
            for (b, h) in hist[..nb - 1].iter().enumerate() {
                left.count += h.count;
                left.w += h.w;
                left.wy += h.wy;
                left.wyy += h.wyy;
                if left.count == 0 {
                    continue;
                }
                let right = total.minus(&left);
                if right.count == 0 {
                    break;
                }
                let gain = (parent_imp - left.impurity(task) - right.impurity(task)).max(0.0);
                if best.as_ref().is_none_or(|c| gain > c.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        bin: b,
                    });
                }
            }
        }
        let Some(split) = best else { continue };

        importance[split.feature] += split.gain;
        let col = data.column(split.feature);
        let slice = &mut rows[lo..hi];
        let mut mid = 0;
        for i in 0..slice.len() {
            if (col[slice[i] as usize] as usize) <= split.bin {
                slice.swap(i, mid);
                mid += 1;
            }
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[node] = Node::Split {
            feature: split.feature as u32,
            threshold: data.edges[split.feature][split.bin],
            left: left as u32,
            right: left as u32 + 1,
        };
        stack.push((left + 1, lo + mid, hi, depth + 1));
        stack.push((left, lo, lo + mid, depth + 1));
    }

    FittedTree {
        tree: DecisionTree { nodes },
        importance,
    }
}
