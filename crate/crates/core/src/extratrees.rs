//! Extremely randomized trees for binary classification.
//!
//! Every tree is grown on the full training set (no bootstrap). At each node
//! K attributes are drawn without replacement, one cut is drawn uniformly in
//! each attribute's (min, max) over the node, and the candidate with the
//! highest information gain wins. A node becomes a leaf when it holds fewer
//! than `n_min` samples, is pure, or has only constant attributes.
//!
//! Tree `i` draws from the RNG stream `(seed, i)`, so the first M trees of a
//! larger forest are exactly the forest of M trees.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::trialstore::stratified_folds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EtParams {
    /// Attributes examined per split.
    #[serde(rename = "K")]
    pub k: usize,
    /// Minimum node size eligible for splitting.
    pub n_min: usize,
    /// Number of trees.
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
}

impl EtParams {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.k == 0 || self.k > feature_dim {
            return Err(Error::InvalidParameter(format!(
                "K = {} must lie in 1..={feature_dim}",
                self.k
            )));
        }
        if self.n_min < 2 {
            return Err(Error::InvalidParameter(format!(
                "n_min = {} must be at least 2",
                self.n_min
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("M must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtNode {
    /// Samples with `x[attribute] < cut` go left.
    Split {
        attribute: usize,
        cut: f64,
        left: usize,
        right: usize,
    },
    /// Training counts of class 0 and class 1.
    Leaf { counts: [usize; 2] },
}

/// Nodes stored flat; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<EtNode>,
}

fn entropy(c: [usize; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    c.iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn count(labels: &[bool], samples: &[usize]) -> [usize; 2] {
    let pos = samples.iter().filter(|&&i| labels[i]).count();
    [samples.len() - pos, pos]
}

fn draw_cut(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    for _ in 0..16 {
        let c = lo + (hi - lo) * rng.random::<f64>();
        if c > lo && c < hi {
            return c;
        }
    }
    // Only reachable when hi and lo are adjacent floats.
    hi
}

impl Tree {
    pub fn grow(x: &Array2<f64>, y: &[bool], params: &EtParams, rng: &mut impl Rng) -> Tree {
        let d = x.ncols();
        let mut nodes = vec![EtNode::Leaf { counts: [0, 0] }];
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, (0..x.nrows()).collect())];

        while let Some((id, samples)) = stack.pop() {
            let counts = count(y, &samples);
            if samples.len() < params.n_min || counts[0] == 0 || counts[1] == 0 {
                nodes[id] = EtNode::Leaf { counts };
                continue;
            }
            let ranges: Vec<(usize, f64, f64)> = (0..d)
                .filter_map(|a| {
                    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(x[[i, a]]), hi.max(x[[i, a]]))
                    });
                    (hi > lo).then_some((a, lo, hi))
                })
                .collect();
            if ranges.is_empty() {
                nodes[id] = EtNode::Leaf { counts };
                continue;
            }
            let mut chosen: Vec<usize> = if params.k >= ranges.len() {
                (0..ranges.len()).collect()
            } else {
                index::sample(rng, ranges.len(), params.k).into_vec()
            };
            chosen.sort_unstable();

            let parent = entropy(counts);
            let n = samples.len() as f64;
            let mut best: Option<(f64, usize, f64)> = None;
            for &c in &chosen {
                let (attr, lo, hi) = ranges[c];
                let cut = draw_cut(rng, lo, hi);
                let mut left = [0usize; 2];
                for &i in &samples {
                    if x[[i, attr]] < cut {
                        left[y[i] as usize] += 1;
                    }
                }
                let right = [counts[0] - left[0], counts[1] - left[1]];
                let nl = (left[0] + left[1]) as f64;
                let gain = parent - nl / n * entropy(left) - (n - nl) / n * entropy(right);
                // Strict improvement: earlier (lower-index) attributes win ties.
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, attr, cut));
                }
            }
            let (_, attribute, cut) = best.expect("at least one candidate");
            let (left, right): (Vec<usize>, Vec<usize>) =
                samples.into_iter().partition(|&i| x[[i, attribute]] < cut);
            let l = nodes.len();
            nodes.push(EtNode::Leaf { counts: [0, 0] });
            nodes.push(EtNode::Leaf { counts: [0, 0] });
            nodes[id] = EtNode::Split {
                attribute,
                cut,
                left: l,
                right: l + 1,
            };
            stack.push((l + 1, right));
            stack.push((l, left));
        }
        Tree { nodes }
    }

    fn leaf(&self, row: &[f64]) -> [usize; 2] {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                EtNode::Split {
                    attribute,
                    cut,
                    left,
                    right,
                } => id = if row[*attribute] < *cut { *left } else { *right },
                EtNode::Leaf { counts } => return *counts,
            }
        }
    }

    /// Majority class of the reached leaf; a tied leaf votes class 0.
    pub fn predict_row(&self, row: &[f64]) -> bool {
        let c = self.leaf(row);
        c[1] > c[0]
    }

    /// Training samples routed through this tree, summed over leaves.
    pub fn n_samples_seen(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                EtNode::Leaf { counts } => counts[0] + counts[1],
                EtNode::Split { .. } => 0,
            })
            .sum()
    }

    fn max_attribute(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                EtNode::Split { attribute, .. } => Some(*attribute),
                EtNode::Leaf { .. } => None,
            })
            .max()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtForest {
    pub trees: Vec<Tree>,
    pub params: EtParams,
    pub feature_dim: usize,
}

impl EtForest {
    pub fn validate(&self) -> Result<()> {
        self.params.validate(self.feature_dim)?;
        if self.trees.len() != self.params.m {
            return Err(Error::InvalidParameter(format!(
                "forest holds {} trees, params say {}",
                self.trees.len(),
                self.params.m
            )));
        }
        for (i, t) in self.trees.iter().enumerate() {
            if t.nodes.is_empty() || t.max_attribute().is_some_and(|a| a >= self.feature_dim) {
                return Err(Error::InvalidParameter(format!("tree {i} is malformed")));
            }
        }
        Ok(())
    }

    /// Mode over the first `m` trees; a tied vote gives class 0.
    pub fn predict_row_prefix(&self, row: &[f64], m: usize) -> bool {
        let ones = self.trees[..m].iter().filter(|t| t.predict_row(row)).count();
        2 * ones > m
    }

    pub fn predict_row(&self, row: &[f64]) -> bool {
        self.predict_row_prefix(row, self.trees.len())
    }
}

fn check_training_set(features: &Array2<f64>, labels: &[bool]) -> Result<()> {
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.nrows() < 2 {
        return Err(Error::InsufficientData("need at least 2 samples".into()));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::InsufficientData("training labels hold a single class".into()));
    }
    Ok(())
}

pub fn fit(features: &Array2<f64>, labels: &[bool], params: &EtParams) -> Result<EtForest> {
    check_training_set(features, labels)?;
    params.validate(features.ncols())?;
    let trees = (0..params.m)
        .into_par_iter()
        .map(|i| Tree::grow(features, labels, params, &mut rng::stream(params.seed, &[i as u64])))
        .collect();
    Ok(EtForest {
        trees,
        params: *params,
        feature_dim: features.ncols(),
    })
}

pub fn predict(forest: &EtForest, features: &Array2<f64>) -> Result<Vec<bool>> {
    if features.ncols() != forest.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, forest expects {}",
            features.ncols(),
            forest.feature_dim
        )));
    }
    Ok(features
        .rows()
        .into_iter()
        .map(|r| forest.predict_row(&r.to_vec()))
        .collect())
}

/// Candidate values for `tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtGrid {
    pub k: Vec<usize>,
    pub n_min: Vec<usize>,
    pub m: Vec<usize>,
}

impl EtGrid {
    /// K ∈ {1, ⌈√d⌉, d}, n_min ∈ {2, 5, 10}, M ∈ {50, 100, 200}.
    pub fn default_for(feature_dim: usize) -> Self {
        let d = feature_dim.max(1);
        let mut k = vec![1, (d as f64).sqrt().ceil() as usize, d];
        k.dedup();
        EtGrid {
            k,
            n_min: vec![2, 5, 10],
            m: vec![50, 100, 200],
        }
    }
}

/// Mean stratified-CV accuracy for every grid point, as
/// `(params, accuracy)` in grid order (K, then n_min, then M).
pub fn grid_scores(
    features: &Array2<f64>,
    labels: &[bool],
    grid: &EtGrid,
    folds: usize,
    seed: u64,
) -> Result<Vec<(EtParams, f64)>> {
    check_training_set(features, labels)?;
    if grid.k.is_empty() || grid.n_min.is_empty() || grid.m.is_empty() {
        return Err(Error::InvalidParameter("empty tuning grid".into()));
    }
    let d = features.ncols();
    // K beyond the feature dimension means "all attributes".
    let mut ks: Vec<usize> = grid.k.iter().map(|&k| k.min(d)).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut ms = grid.m.clone();
    ms.sort_unstable();
    ms.dedup();
    let max_m = *ms.last().expect("non-empty");

    let fold_labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let assignment = stratified_folds(&fold_labels, folds, rng::derive_seed(seed, &[0]))?;
    let split = |k: usize| {
        let (train, test): (Vec<usize>, Vec<usize>) =
            (0..labels.len()).partition(|&i| assignment[i] != k);
        (train, test)
    };
    let fold_sets: Vec<(Vec<usize>, Vec<usize>)> = (0..folds).map(split).collect();

    let combos: Vec<(usize, usize)> = ks
        .iter()
        .flat_map(|&k| grid.n_min.iter().map(move |&n| (k, n)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..combos.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();

    // Per (combo, fold): accuracy at each M in `ms`, from one forest of max_m trees.
    let per_job = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (k, n_min) = combos[c];
            let (train, test) = &fold_sets[f];
            let x_train = features.select(ndarray::Axis(0), train);
            let y_train: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let params = EtParams {
                k,
                n_min,
                m: max_m,
                seed,
            };
            let forest = fit(&x_train, &y_train, &params)?;
            let test_rows: Vec<Vec<f64>> = test.iter().map(|&i| features.row(i).to_vec()).collect();
            Ok(ms
                .iter()
                .map(|&m| {
                    let correct = test_rows
                        .iter()
                        .zip(test)
                        .filter(|(row, &i)| forest.predict_row_prefix(row, m) == labels[i])
                        .count();
                    correct as f64 / test.len() as f64
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for (c, &(k, n_min)) in combos.iter().enumerate() {
        for (mi, &m) in ms.iter().enumerate() {
            let acc = (0..folds).map(|f| per_job[c * folds + f][mi]).sum::<f64>() / folds as f64;
            out.push((EtParams { k, n_min, m, seed }, acc));
        }
    }
    Ok(out)
}

/// Grid point with the best mean CV accuracy. Ties go to the cheapest model:
/// smaller M, then smaller K, then larger n_min.
pub fn tune(
    features: &Array2<f64>,
    labels: &[bool],
    grid: &EtGrid,
    folds: usize,
    seed: u64,
) -> Result<EtParams> {
    let scores = grid_scores(features, labels, grid, folds, seed)?;
    let better = |a: &(EtParams, f64), b: &(EtParams, f64)| -> bool {
        if (a.1 - b.1).abs() > 1e-12 {
            return a.1 > b.1;
        }
        (a.0.m, a.0.k, std::cmp::Reverse(a.0.n_min)) < (b.0.m, b.0.k, std::cmp::Reverse(b.0.n_min))
    };
    let mut best = scores[0];
    for s in &scores[1..] {
        if better(s, &best) {
            best = *s;
        }
    }
    Ok(best.0)
}
