//! Regression random forest grown on contiguous time blocks.
//!
//! Each tree is trained on a without-replacement sample of fixed,
//! non-overlapping blocks of consecutive observations. Out-of-bag
//! predictions for observation `t` only use trees that never saw `t`'s
//! block, which keeps serially dependent neighbours out of the estimate.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("invalid forest config: {0}")]
    Config(String),
    #[error("need at least {needed} rows, got {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("need at least 2 blocks for out-of-bag predictions, got {0}")]
    TooFewBlocks(usize),
    #[error("{rows} feature rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("forest expects {expected} features, got {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("non-finite input at row {0}")]
    NonFinite(usize),
    #[error("no observation has out-of-bag coverage")]
    NoCoverage,
}

pub type Result<T> = std::result::Result<T, ForestError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Fraction of features drawn as split candidates at every node.
    pub mtry_fraction: f64,
    /// Minimum number of observations in a leaf.
    pub min_node_size: usize,
    /// Block length in periods.
    pub block_size: usize,
    /// Fraction of blocks each tree is trained on.
    pub subsampling_rate: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self::monthly()
    }
}

impl ForestConfig {
    pub fn monthly() -> Self {
        Self {
            n_trees: 500,
            mtry_fraction: 1.0 / 3.0,
            min_node_size: 20,
            block_size: 24,
            subsampling_rate: 0.8,
            seed: 0,
        }
    }

    pub fn daily() -> Self {
        Self {
            n_trees: 1500,
            mtry_fraction: 0.1,
            min_node_size: 200,
            block_size: 42,
            subsampling_rate: 0.8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForestError::Config(m.to_owned()));
        if self.n_trees == 0 {
            return bad("n_trees must be >= 1");
        }
        if !(self.mtry_fraction > 0.0 && self.mtry_fraction <= 1.0) {
            return bad("mtry_fraction must lie in (0, 1]");
        }
        if self.min_node_size == 0 {
            return bad("min_node_size must be >= 1");
        }
        if self.block_size == 0 {
            return bad("block_size must be >= 1");
        }
        if !(self.subsampling_rate > 0.0 && self.subsampling_rate < 1.0) {
            return bad("subsampling_rate must lie in (0, 1)");
        }
        Ok(())
    }

    /// Number of candidate features per split for `k` features.
    pub fn mtry(&self, k: usize) -> usize {
        ((self.mtry_fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k.max(1))
    }

    /// Number of blocks each tree trains on, always leaving one out.
    pub fn blocks_per_tree(&self, n_blocks: usize) -> usize {
        let n = (self.subsampling_rate * n_blocks as f64 - 1e-9).ceil() as usize;
        n.clamp(1, n_blocks.saturating_sub(1).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    /// Observations with `x[feature] <= threshold` go left.
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub split: Option<Split>,
    /// Mean target of the training observations reaching the node.
    pub value: f64,
    /// Number of training observations reaching the node.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    trained_blocks: Vec<usize>,
}

impl Tree {
    /// Builds a tree from explicit nodes; node 0 is the root.
    pub fn from_nodes(nodes: Vec<Node>, mut trained_blocks: Vec<usize>) -> Self {
        trained_blocks.sort_unstable();
        trained_blocks.dedup();
        Self {
            nodes,
            trained_blocks,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Sorted block indices the tree was trained on.
    pub fn trained_blocks(&self) -> &[usize] {
        &self.trained_blocks
    }

    pub fn trained_on(&self, block: usize) -> bool {
        self.trained_blocks.binary_search(&block).is_ok()
    }

    pub fn leaf_for(&self, row: impl Fn(usize) -> f64) -> usize {
        let mut n = 0;
        while let Some(s) = &self.nodes[n].split {
            n = if row(s.feature) <= s.threshold {
                s.left
            } else {
                s.right
            };
        }
        n
    }

    pub fn predict_with(&self, row: impl Fn(usize) -> f64) -> f64 {
        self.nodes[self.leaf_for(row)].value
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.predict_with(|f| row[f])
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], n: usize) -> usize {
            match &nodes[n].split {
                None => 0,
                Some(s) => 1 + go(nodes, s.left).max(go(nodes, s.right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }
}

/// Out-of-bag predictions with per-row tree coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OobPredictions {
    /// `None` where no tree left the row's block out.
    pub prediction: Vec<Option<f64>>,
    pub coverage: Vec<usize>,
}

impl OobPredictions {
    pub fn uncovered(&self) -> usize {
        self.coverage.iter().filter(|&&c| c == 0).count()
    }

    pub fn mean_coverage(&self) -> f64 {
        self.coverage.iter().sum::<usize>() as f64 / self.coverage.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    config: ForestConfig,
    block_assignment: Vec<usize>,
    n_features: usize,
    oob: OobPredictions,
}

/// Contiguous blocks of `block_size` observations; the last may be shorter.
pub fn assign_blocks(n_obs: usize, block_size: usize) -> Vec<usize> {
    (0..n_obs).map(|t| t / block_size).collect()
}

struct Grower<'a> {
    columns: &'a [Vec<f64>],
    y: &'a [f64],
    min_node: usize,
    mtry: usize,
}

impl Grower<'_> {
    fn grow(&self, rows: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<Node> {
        let mut nodes = Vec::new();
        self.grow_node(rows, rng, &mut nodes);
        nodes
    }

    fn grow_node(&self, rows: Vec<usize>, rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> usize {
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let mean = sum / n as f64;
        let id = nodes.len();
        nodes.push(Node {
            split: None,
            value: mean,
            count: n,
        });
        let pure = rows.iter().all(|&r| self.y[r] == self.y[rows[0]]);
        if n < 2 * self.min_node || pure {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&rows, sum, rng) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&r| self.columns[feature][r] <= threshold);
        let left = self.grow_node(left_rows, rng, nodes);
        let right = self.grow_node(right_rows, rng, nodes);
        nodes[id].split = Some(Split {
            feature,
            threshold,
            left,
            right,
        });
        id
    }

    /// Best variance-reducing split among `mtry` random features. Ties go to
    /// the lowest feature index, then the lowest threshold.
    fn best_split(&self, rows: &[usize], total: f64, rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let k = self.columns.len();
        let mut candidates = index::sample(rng, k, self.mtry).into_vec();
        candidates.sort_unstable();
        let n = rows.len();
        let base = total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for &f in &candidates {
            let col = &self.columns[f];
            pairs.clear();
            pairs.extend(rows.iter().map(|&r| (col[r], self.y[r])));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut left_sum = 0.0;
            for i in 0..n - 1 {
                left_sum += pairs[i].1;
                let n_left = i + 1;
                if n_left < self.min_node {
                    continue;
                }
                if n - n_left < self.min_node {
                    break;
                }
                let (a, b) = (pairs[i].0, pairs[i + 1].0);
                if a >= b {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / (n - n_left) as f64
                    - base;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid >= a && mid < b { mid } else { a };
                    best = Some((gain, f, threshold));
                }
            }
        }
        let tol = 1e-12 * (base.abs() + 1e-300);
        best.filter(|(g, _, _)| *g > tol).map(|(_, f, t)| (f, t))
    }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

/// Grows the forest and records block out-of-bag predictions.
pub fn fit_forest(x: &DMatrix<f64>, y: &[f64], config: &ForestConfig) -> Result<Forest> {
    config.validate()?;
    let (t, k) = x.shape();
    if t != y.len() {
        return Err(ForestError::LengthMismatch {
            rows: t,
            targets: y.len(),
        });
    }
    let needed = (2 * config.min_node_size).max(2);
    if t < needed {
        return Err(ForestError::TooFewRows { needed, found: t });
    }
    if k == 0 {
        return Err(ForestError::FeatureMismatch {
            expected: 1,
            found: 0,
        });
    }
    for r in 0..t {
        if !y[r].is_finite() || (0..k).any(|c| !x[(r, c)].is_finite()) {
            return Err(ForestError::NonFinite(r));
        }
    }
    let block_assignment = assign_blocks(t, config.block_size);
    let n_blocks = block_assignment[t - 1] + 1;
    if n_blocks < 2 {
        return Err(ForestError::TooFewBlocks(n_blocks));
    }
    let per_tree = config.blocks_per_tree(n_blocks);
    let columns: Vec<Vec<f64>> = (0..k).map(|c| x.column(c).iter().copied().collect()).collect();
    let grower = Grower {
        columns: &columns,
        y,
        min_node: config.min_node_size,
        mtry: config.mtry(k),
    };

    let grown: Vec<(Tree, Vec<(usize, f64)>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|j| {
            let mut rng = tree_rng(config.seed, j);
            let mut blocks = index::sample(&mut rng, n_blocks, per_tree).into_vec();
            blocks.sort_unstable();
            let mut in_bag = vec![false; n_blocks];
            for &b in &blocks {
                in_bag[b] = true;
            }
            let rows: Vec<usize> = (0..t).filter(|&r| in_bag[block_assignment[r]]).collect();
            let tree = Tree {
                nodes: grower.grow(rows, &mut rng),
                trained_blocks: blocks,
            };
            let oob: Vec<(usize, f64)> = (0..t)
                .filter(|&r| !in_bag[block_assignment[r]])
                .map(|r| (r, tree.predict_with(|f| columns[f][r])))
                .collect();
            (tree, oob)
        })
        .collect();

    let mut sums = vec![0.0; t];
    let mut coverage = vec![0usize; t];
    let mut trees = Vec::with_capacity(grown.len());
    for (tree, oob) in grown {
        for (r, p) in oob {
            sums[r] += p;
            coverage[r] += 1;
        }
        trees.push(tree);
    }
    let prediction = sums
        .iter()
        .zip(&coverage)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();

    Ok(Forest {
        trees,
        config: config.clone(),
        block_assignment,
        n_features: k,
        oob: OobPredictions {
            prediction,
            coverage,
        },
    })
}

impl Forest {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn block_assignment(&self) -> &[usize] {
        &self.block_assignment
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_training_rows(&self) -> usize {
        self.block_assignment.len()
    }

    /// Assembles a forest from explicit trees. Out-of-bag predictions are
    /// left empty.
    pub fn from_trees(
        trees: Vec<Tree>,
        config: ForestConfig,
        block_assignment: Vec<usize>,
        n_features: usize,
    ) -> Self {
        let t = block_assignment.len();
        Self {
            trees,
            config,
            block_assignment,
            n_features,
            oob: OobPredictions {
                prediction: vec![None; t],
                coverage: vec![0; t],
            },
        }
    }

    fn check_width(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.n_features {
            return Err(ForestError::FeatureMismatch {
                expected: self.n_features,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        s / self.trees.len() as f64
    }

    /// Average of all tree predictions per row.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_width(x)?;
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|r| {
                let row: Vec<f64> = x.row(r).iter().copied().collect();
                self.predict_row(&row)
            })
            .collect())
    }

    /// Block out-of-bag predictions for the training rows.
    pub fn predict_oob(&self) -> &OobPredictions {
        &self.oob
    }

    /// Out-of-bag series with uncovered rows filled by the full-forest
    /// prediction; also returns the number of filled rows.
    pub fn oob_filled(&self, x: &DMatrix<f64>) -> Result<(Vec<f64>, usize)> {
        self.check_width(x)?;
        if x.nrows() != self.n_training_rows() {
            return Err(ForestError::LengthMismatch {
                rows: x.nrows(),
                targets: self.n_training_rows(),
            });
        }
        let mut filled = 0;
        let out = self
            .oob
            .prediction
            .iter()
            .enumerate()
            .map(|(r, p)| match p {
                Some(v) => *v,
                None => {
                    filled += 1;
                    let row: Vec<f64> = x.row(r).iter().copied().collect();
                    self.predict_row(&row)
                }
            })
            .collect();
        Ok((out, filled))
    }

    /// RMSE of the out-of-bag predictions over covered rows.
    pub fn oob_rmse(&self, y: &[f64]) -> Result<f64> {
        oob_rmse(&self.oob, y)
    }
}

pub fn oob_rmse(oob: &OobPredictions, y: &[f64]) -> Result<f64> {
    if oob.prediction.len() != y.len() {
        return Err(ForestError::LengthMismatch {
            rows: oob.prediction.len(),
            targets: y.len(),
        });
    }
    let (sse, n) = oob
        .prediction
        .iter()
        .zip(y)
        .filter_map(|(p, y)| p.map(|p| (p - y).powi(2)))
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    if n == 0 {
        return Err(ForestError::NoCoverage);
    }
    Ok((sse / n as f64).sqrt())
}
