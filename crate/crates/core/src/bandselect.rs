//! Frequency-band scoring with LDA and threshold selection.
//!
//! Each band is scored by stratified k-fold cross-validation: inside every
//! fold, CSP is fit on the training trials only, the 2m log-variance features
//! feed a Fisher discriminant, and held-out accuracy is averaged over folds.
//! Bands whose score reaches `max(f) − sd(f)` are kept.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csp::{self, BandMoments, CspModel, TrialMoments};
use crate::dsp::BandDecomposition;
use crate::error::{Error, Result};
use crate::rng;
use crate::trialstore::stratified_folds;

/// Scores within this distance below the threshold still count as reaching it.
pub const THRESHOLD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LdaModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// Fisher discriminant with diagonal shrinkage `shrinkage · mean(diag Σ)`.
/// `labels[i] == true` marks class 1.
pub fn lda_fit(features: &Array2<f64>, labels: &[bool], shrinkage: f64) -> Result<LdaModel> {
    let (n, d) = features.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    if d == 0 {
        return Err(Error::InvalidParameter("no features".into()));
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::InsufficientData("LDA needs both classes".into()));
    }

    let mut mu = [DVector::zeros(d), DVector::zeros(d)];
    for (row, &l) in features.rows().into_iter().zip(labels) {
        for j in 0..d {
            mu[l as usize][j] += row[j];
        }
    }
    mu[0] /= n0 as f64;
    mu[1] /= n1 as f64;

    let mut pooled = DMatrix::zeros(d, d);
    for (row, &l) in features.rows().into_iter().zip(labels) {
        let centered = DVector::from_iterator(d, row.iter().copied()) - &mu[l as usize];
        pooled += &centered * centered.transpose();
    }
    pooled /= (n as f64 - 2.0).max(1.0);
    let ridge = shrinkage * pooled.trace() / d as f64;
    for j in 0..d {
        pooled[(j, j)] += ridge;
    }

    let diff = &mu[1] - &mu[0];
    let w = pooled
        .clone()
        .cholesky()
        .map(|c| c.solve(&diff))
        .or_else(|| pooled.lu().solve(&diff))
        .ok_or_else(|| Error::Singular("pooled covariance is singular".into()))?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("pooled covariance is singular".into()));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::Singular("class means coincide".into()));
    }
    let midpoint = (&mu[0] + &mu[1]) * 0.5;
    Ok(LdaModel {
        weights: w.iter().copied().collect(),
        bias: -w.dot(&midpoint),
    })
}

/// Class 1 iff `w·x + b > 0`; an exact zero goes to class 0.
pub fn lda_predict(model: &LdaModel, features: &Array2<f64>) -> Result<Vec<bool>> {
    if features.ncols() != model.weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, LDA expects {}",
            features.ncols(),
            model.weights.len()
        )));
    }
    Ok(features
        .rows()
        .into_iter()
        .map(|r| model.decision(r.as_slice().expect("standard layout")) > 0.0)
        .collect())
}

/// A two-class problem over a subset of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTask {
    /// Trial indices into the decomposition.
    pub trials: Vec<usize>,
    /// `true` for S⁺, parallel to `trials`.
    pub positive: Vec<bool>,
}

impl BinaryTask {
    /// Class `a` against class `b` among `within` (or all trials).
    pub fn pair(labels: &[usize], a: usize, b: usize, within: Option<&[usize]>) -> Self {
        let pool: Vec<usize> = match within {
            Some(w) => w.to_vec(),
            None => (0..labels.len()).collect(),
        };
        let trials: Vec<usize> = pool
            .into_iter()
            .filter(|&i| labels[i] == a || labels[i] == b)
            .collect();
        let positive = trials.iter().map(|&i| labels[i] == a).collect();
        BinaryTask { trials, positive }
    }

    /// Relabels `within` by a code column: class c goes to S⁺ iff `bits[c]`.
    pub fn from_column(labels: &[usize], bits: &[bool], within: &[usize]) -> Self {
        BinaryTask {
            trials: within.to_vec(),
            positive: within.iter().map(|&i| bits[labels[i]]).collect(),
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.positive.iter().filter(|&&p| p).count();
        (pos, self.positive.len() - pos)
    }

    fn fold_labels(&self) -> Vec<usize> {
        self.positive.iter().map(|&p| p as usize).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub m: usize,
    pub folds: usize,
    pub shrinkage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandScore {
    pub band: (f64, f64),
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub scores: Vec<BandScore>,
    pub threshold: f64,
    pub selected: Vec<usize>,
}

/// Feature matrix of CSP log-variances for the given trials.
pub fn feature_matrix(moments: &[TrialMoments], trials: &[usize], model: &CspModel) -> Result<Array2<f64>> {
    let d = model.n_features();
    let mut out = Array2::zeros((trials.len(), d));
    for (r, &t) in trials.iter().enumerate() {
        let f = csp::features_from_moments(&moments[t], model)?;
        for (j, v) in f.into_iter().enumerate() {
            out[[r, j]] = v;
        }
    }
    Ok(out)
}

/// CSP + LDA fitted on the training part of one fold. Only `train` trials
/// are read.
pub fn fit_fold(
    moments: &[TrialMoments],
    train: &[usize],
    positive: &[bool],
    band: (f64, f64),
    cfg: &ScoreConfig,
) -> Result<(CspModel, LdaModel)> {
    let pos: Vec<&TrialMoments> = train
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&t, _)| &moments[t])
        .collect();
    let neg: Vec<&TrialMoments> = train
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(&t, _)| &moments[t])
        .collect();
    let model = csp::fit_csp_moments(&pos, &neg, cfg.m, band)?;
    let features = feature_matrix(moments, train, &model)?;
    let lda = lda_fit(&features, positive, cfg.shrinkage)?;
    Ok((model, lda))
}

/// Cross-validated LDA accuracy of one band.
pub fn score_band(
    moments: &BandMoments,
    band_index: usize,
    task: &BinaryTask,
    cfg: &ScoreConfig,
    seed: u64,
) -> Result<f64> {
    let folds = stratified_folds(
        &task.fold_labels(),
        cfg.folds,
        rng::derive_seed(seed, &[band_index as u64]),
    )?;
    let band_moments = &moments.per_band[band_index];
    let band = moments.bands[band_index];
    let mut total = 0.0;
    for k in 0..cfg.folds {
        let (mut train, mut train_pos, mut test, mut test_pos) = (vec![], vec![], vec![], vec![]);
        for (i, (&t, &p)) in task.trials.iter().zip(&task.positive).enumerate() {
            if folds[i] == k {
                test.push(t);
                test_pos.push(p);
            } else {
                train.push(t);
                train_pos.push(p);
            }
        }
        let (model, lda) = fit_fold(band_moments, &train, &train_pos, band, cfg)?;
        let predicted = lda_predict(&lda, &feature_matrix(band_moments, &test, &model)?)?;
        let correct = predicted.iter().zip(&test_pos).filter(|(a, b)| a == b).count();
        total += correct as f64 / test.len() as f64;
    }
    Ok(total / cfg.folds as f64)
}

pub fn score_bands(
    moments: &BandMoments,
    task: &BinaryTask,
    cfg: &ScoreConfig,
    seed: u64,
) -> Result<Vec<BandScore>> {
    let (pos, neg) = task.counts();
    if pos < cfg.folds || neg < cfg.folds {
        return Err(Error::InsufficientData(format!(
            "{pos} positive and {neg} negative trials cannot fill {} folds",
            cfg.folds
        )));
    }
    (0..moments.n_bands())
        .into_par_iter()
        .map(|b| {
            Ok(BandScore {
                band: moments.bands[b],
                f: score_band(moments, b, task, cfg, seed)?,
            })
        })
        .collect()
}

/// Scores class `a` against class `b` on a full decomposition.
pub fn score_pair(
    decomp: &BandDecomposition,
    a: usize,
    b: usize,
    cfg: &ScoreConfig,
    seed: u64,
) -> Result<Vec<BandScore>> {
    let moments = BandMoments::from_decomposition(decomp)?;
    let task = BinaryTask::pair(&moments.labels, a, b, None);
    score_bands(&moments, &task, cfg, seed)
}

/// `T_H = max(f) − sd(f)` with the n − 1 standard deviation; keeps every band
/// with `f ≥ T_H`.
pub fn select_bands(scores: &[BandScore]) -> Result<SelectionResult> {
    if scores.is_empty() {
        return Err(Error::InsufficientData("no band scores".into()));
    }
    let n = scores.len() as f64;
    let max = scores.iter().map(|s| s.f).fold(f64::NEG_INFINITY, f64::max);
    let sd = if scores.len() > 1 {
        let mean = scores.iter().map(|s| s.f).sum::<f64>() / n;
        (scores.iter().map(|s| (s.f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let threshold = max - sd;
    let selected = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.f >= threshold - THRESHOLD_TOLERANCE)
        .map(|(i, _)| i)
        .collect();
    Ok(SelectionResult {
        scores: scores.to_vec(),
        threshold,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn scores(fs: &[f64]) -> Vec<BandScore> {
        fs.iter()
            .enumerate()
            .map(|(i, &f)| BandScore {
                band: (i as f64, i as f64 + 1.0),
                f,
            })
            .collect()
    }

    fn gaussian_clusters(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<bool>) {
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
        let x = Array2::from_shape_fn((n, d), |(i, _)| {
            let z: f64 = StandardNormal.sample(rng);
            z + if labels[i] { shift } else { 0.0 }
        });
        (x, labels)
    }

    #[test]
    fn threshold_hand_example() {
        let r = select_bands(&scores(&[0.8, 0.7, 0.6])).unwrap();
        assert!((r.threshold - 0.7).abs() < 1e-12);
        assert_eq!(r.selected, vec![0, 1]);
    }

    #[test]
    fn equal_scores_select_everything() {
        let r = select_bands(&scores(&[0.55; 5])).unwrap();
        assert_eq!(r.threshold, 0.55);
        assert_eq!(r.selected, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_band_is_selected() {
        let r = select_bands(&scores(&[0.42])).unwrap();
        assert_eq!(r.selected, vec![0]);
        assert!(select_bands(&[]).is_err());
    }

    #[test]
    fn separated_clusters_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let x = Array2::from_shape_fn((100, 1), |(i, _)| {
            let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
            z + if labels[i] { 10.0 } else { 0.0 }
        });
        let model = lda_fit(&x, &labels, 1e-3).unwrap();
        assert_eq!(lda_predict(&model, &x).unwrap(), labels);
    }

    #[test]
    fn identical_means_give_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = gaussian_clusters(500, 2, 0.0, &mut rng);
        let model = lda_fit(&x, &y, 1e-3).unwrap();
        let (xt, yt) = gaussian_clusters(500, 2, 0.0, &mut rng);
        let p = lda_predict(&model, &xt).unwrap();
        let acc = p.iter().zip(&yt).filter(|(a, b)| a == b).count() as f64 / 500.0;
        assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn row_permutation_leaves_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = gaussian_clusters(40, 3, 1.0, &mut rng);
        let order: Vec<usize> = (0..40).rev().collect();
        let xp = x.select(ndarray::Axis(0), &order);
        let yp: Vec<bool> = order.iter().map(|&i| y[i]).collect();
        let a = lda_fit(&x, &y, 1e-3).unwrap();
        let b = lda_fit(&xp, &yp, 1e-3).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u - v).abs() < 1e-10);
        }
        assert!((a.bias - b.bias).abs() < 1e-10);
    }

    #[test]
    fn tie_rule_and_class_mean() {
        let x = ndarray::array![[0.0], [1.0], [3.0], [4.0]];
        let y = [false, false, true, true];
        let model = lda_fit(&x, &y, 0.0).unwrap();
        let p = lda_predict(&model, &ndarray::array![[2.0], [3.5]]).unwrap();
        assert_eq!(p, vec![false, true]);
    }

    #[test]
    fn linear_map_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = gaussian_clusters(60, 3, 0.8, &mut rng);
        let (xt, _) = gaussian_clusters(60, 3, 0.8, &mut rng);
        let a = ndarray::array![[2.0, 0.3, -1.0], [0.1, 1.5, 0.4], [-0.7, 0.2, 0.9]];
        let base = lda_predict(&lda_fit(&x, &y, 0.0).unwrap(), &xt).unwrap();
        let mapped_model = lda_fit(&x.dot(&a.t()), &y, 0.0).unwrap();
        let mapped = lda_predict(&mapped_model, &xt.dot(&a.t())).unwrap();
        assert_eq!(base, mapped);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = LdaModel {
            weights: vec![1.0, 2.0],
            bias: 0.0,
        };
        assert!(lda_predict(&model, &Array2::zeros((3, 1))).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(lda_fit(&Array2::zeros((4, 1)), &[true; 4], 0.0).is_err());
    }

    #[test]
    fn random_score_vectors_never_select_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.random_range(1..20);
            let fs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let r = select_bands(&scores(&fs)).unwrap();
            let argmax = (0..n).max_by(|&a, &b| fs[a].total_cmp(&fs[b])).unwrap();
            assert!(r.selected.contains(&argmax));
        }
    }

    #[test]
    fn adding_a_low_band_keeps_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.random_range(2..10);
            let mut fs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let before = select_bands(&scores(&fs)).unwrap();
            fs.push(before.threshold * rng.random::<f64>());
            let after = select_bands(&scores(&fs)).unwrap();
            for &i in &before.selected {
                if fs[i] >= after.threshold {
                    assert!(after.selected.contains(&i));
                }
            }
        }
    }
}
