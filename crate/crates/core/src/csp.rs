//! Common Spatial Patterns for two-class problems.
//!
//! Trial covariances are trace normalized, `C = X Xᵀ / tr(X Xᵀ)`, and
//! averaged per class. The spatial filters solve `C_a w = λ (C_a + C_b) w`
//! by whitening the (ridge-regularized) composite and diagonalizing the
//! whitened class-a covariance. Filter rows are sorted by λ descending: the
//! first rows maximize class-a variance, the last rows class-b variance.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{BandDecomposition, BankPlan, FilterBank};
use crate::error::{Error, Result};
use crate::trialstore::{Dataset, Trial};

/// Relative ridge added to the composite covariance before whitening.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CspModel {
    pub band: (f64, f64),
    /// Components kept from each end of the spectrum.
    pub m: usize,
    pub eigenvalues: Vec<f64>,
    /// N×N, one spatial filter per row. Serialized row-major.
    #[serde(with = "rows")]
    pub filters: DMatrix<f64>,
}

impl CspModel {
    pub fn n_channels(&self) -> usize {
        self.filters.ncols()
    }

    /// Filter rows used for features: the first m and the last m.
    pub fn selected_rows(&self) -> Vec<usize> {
        let n = self.filters.nrows();
        (0..self.m).chain(n - self.m..n).collect()
    }

    pub fn n_features(&self) -> usize {
        2 * self.m
    }
}

fn gram(samples: &Array2<f64>) -> DMatrix<f64> {
    let g = samples.dot(&samples.t());
    let n = g.nrows();
    DMatrix::from_fn(n, n, |i, j| g[[i, j]])
}

fn normalize_trace(g: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let tr = g.trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::Singular("trial has zero total power".into()));
    }
    Ok(g / tr)
}

pub fn trial_covariance(trial: &Trial) -> Result<DMatrix<f64>> {
    if trial.n_samples() < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 samples, trial has {}",
            trial.n_samples()
        )));
    }
    normalize_trace(gram(&trial.samples))
}

pub fn class_covariance(trials: &[&Trial]) -> Result<DMatrix<f64>> {
    let covs = trials
        .iter()
        .map(|t| trial_covariance(t))
        .collect::<Result<Vec<_>>>()?;
    mean_covariance(covs.iter())
}

pub fn mean_covariance<'a>(covs: impl IntoIterator<Item = &'a DMatrix<f64>>) -> Result<DMatrix<f64>> {
    let mut iter = covs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InsufficientData("no trials for class covariance".into()))?;
    let mut sum = first.clone();
    let mut count = 1usize;
    for c in iter {
        if c.shape() != sum.shape() {
            return Err(Error::DimensionMismatch(format!(
                "covariance {:?} vs {:?}",
                c.shape(),
                sum.shape()
            )));
        }
        sum += c;
        count += 1;
    }
    Ok(sum / count as f64)
}

pub fn fit_csp(class_a: &[&Trial], class_b: &[&Trial], m: usize, band: (f64, f64)) -> Result<CspModel> {
    let ca = class_covariance(class_a)?;
    let cb = class_covariance(class_b)?;
    fit_csp_covariances(&ca, &cb, m, band)
}

/// Largest-magnitude entry positive, first one wins on ties.
fn fix_sign(row: &mut [f64]) {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.abs() > row[best].abs() {
            best = i;
        }
    }
    if row[best] < 0.0 {
        row.iter_mut().for_each(|v| *v = -*v);
    }
}

fn quad(w: &[f64], c: &DMatrix<f64>) -> f64 {
    let n = w.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += c[(i, j)] * w[j];
        }
        acc += w[i] * row;
    }
    acc
}

pub fn fit_csp_covariances(
    ca: &DMatrix<f64>,
    cb: &DMatrix<f64>,
    m: usize,
    band: (f64, f64),
) -> Result<CspModel> {
    let n = ca.nrows();
    if ca.shape() != (n, n) || cb.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "class covariances {:?} and {:?} must be square and equal",
            ca.shape(),
            cb.shape()
        )));
    }
    if m == 0 || 2 * m > n {
        return Err(Error::InvalidParameter(format!(
            "m = {m} needs 1 ≤ m and 2m ≤ {n} channels"
        )));
    }
    let composite = ca + cb;
    let tr = composite.trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::Singular("composite covariance has zero trace".into()));
    }
    let regularized = &composite + DMatrix::identity(n, n) * (RIDGE * tr / n as f64);

    let eig = SymmetricEigen::new(regularized);
    let max_val = eig.eigenvalues.max();
    if eig.eigenvalues.iter().any(|&v| v.is_nan() || v <= max_val * 1e-15) {
        return Err(Error::Singular(
            "composite covariance is singular after regularization".into(),
        ));
    }
    // Whitening P = D^-1/2 Uᵀ.
    let mut whitening = eig.eigenvectors.transpose();
    for (i, mut row) in whitening.row_iter_mut().enumerate() {
        row /= eig.eigenvalues[i].sqrt();
    }
    let mut s = &whitening * ca * whitening.transpose();
    s = (&s + s.transpose()) * 0.5;
    let inner = SymmetricEigen::new(s);

    let mut rows: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|k| {
            let w = inner.eigenvectors.column(k).transpose() * &whitening;
            let mut w: Vec<f64> = w.iter().copied().collect();
            // Rescale to unit variance on the unregularized composite and
            // report the exact variance ratio there.
            let q = quad(&w, &composite);
            let lambda = if q > 0.5 {
                let s = q.sqrt();
                w.iter_mut().for_each(|v| *v /= s);
                quad(&w, ca) / quad(&w, &composite)
            } else {
                quad(&w, ca)
            };
            fix_sign(&mut w);
            (lambda, w)
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));

    let eigenvalues = rows.iter().map(|r| r.0).collect();
    let filters = DMatrix::from_fn(n, n, |i, j| rows[i].1[j]);
    Ok(CspModel {
        band,
        m,
        eigenvalues,
        filters,
    })
}

fn log_variance_ratio(vars: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = vars.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Singular("projected signals have zero variance".into()));
    }
    Ok(vars.iter().map(|v| (v / total).ln()).collect())
}

/// `log(var_p / Σ_q var_q)` over the 2m selected projections.
pub fn extract_features(trial: &Trial, model: &CspModel) -> Result<Vec<f64>> {
    if trial.n_channels() != model.n_channels() {
        return Err(Error::DimensionMismatch(format!(
            "trial has {} channels, CSP model expects {}",
            trial.n_channels(),
            model.n_channels()
        )));
    }
    if trial.n_samples() < 2 {
        return Err(Error::InsufficientData("variance needs 2 samples".into()));
    }
    let vars = model
        .selected_rows()
        .into_iter()
        .map(|r| {
            let w = ndarray::Array1::from_iter(model.filters.row(r).iter().copied());
            let projected = w.dot(&trial.samples);
            projected.var(1.0)
        })
        .collect();
    log_variance_ratio(vars)
}

/// Same features as [`extract_features`], from a trial's precomputed
/// centered covariance.
pub fn features_from_moments(moments: &TrialMoments, model: &CspModel) -> Result<Vec<f64>> {
    if moments.scatter.nrows() != model.n_channels() {
        return Err(Error::DimensionMismatch(format!(
            "trial has {} channels, CSP model expects {}",
            moments.scatter.nrows(),
            model.n_channels()
        )));
    }
    let vars = model
        .selected_rows()
        .into_iter()
        .map(|r| {
            let w: Vec<f64> = model.filters.row(r).iter().copied().collect();
            quad(&w, &moments.scatter)
        })
        .collect();
    log_variance_ratio(vars)
}

/// Second moments of one band-filtered trial: everything CSP fitting and
/// feature extraction need.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMoments {
    /// `X Xᵀ / tr(X Xᵀ)`.
    pub normalized: DMatrix<f64>,
    /// Mean-centered sample covariance, denominator T − 1.
    pub scatter: DMatrix<f64>,
}

impl TrialMoments {
    pub fn from_trial(trial: &Trial) -> Result<Self> {
        let t = trial.n_samples();
        if t < 2 {
            return Err(Error::InsufficientData(format!(
                "moments need at least 2 samples, trial has {t}"
            )));
        }
        let g = gram(&trial.samples);
        let means = trial.samples.mean_axis(Axis(1)).expect("non-empty trial");
        let n = g.nrows();
        let scatter = DMatrix::from_fn(n, n, |i, j| {
            (g[(i, j)] - t as f64 * means[i] * means[j]) / (t - 1) as f64
        });
        Ok(TrialMoments {
            normalized: normalize_trace(g)?,
            scatter,
        })
    }
}

/// Per-band, per-trial moments of a decomposed dataset.
#[derive(Debug, Clone)]
pub struct BandMoments {
    pub bands: Vec<(f64, f64)>,
    pub labels: Vec<usize>,
    pub n_channels: usize,
    /// `per_band[band][trial]`.
    pub per_band: Vec<Vec<TrialMoments>>,
}

impl BandMoments {
    pub fn from_decomposition(decomp: &BandDecomposition) -> Result<Self> {
        let per_band = decomp
            .datasets
            .par_iter()
            .map(|ds| ds.trials.iter().map(TrialMoments::from_trial).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(BandMoments {
            bands: decomp.bands.clone(),
            labels: decomp.labels(),
            n_channels: decomp.datasets[0].n_channels(),
            per_band,
        })
    }

    /// Filters and reduces trial by trial, never holding the full
    /// decomposition in memory.
    pub fn from_dataset(dataset: &Dataset, bank: &FilterBank) -> Result<Self> {
        dataset.validate()?;
        let len = dataset.trials[0].n_samples();
        if dataset.trials.iter().any(|t| t.n_samples() != len) {
            return Err(Error::DimensionMismatch("trials differ in length".into()));
        }
        let plan = BankPlan::new(bank, dataset.sample_rate, len)?;
        let per_trial = dataset
            .trials
            .par_iter()
            .map(|t| trial_band_moments(t, &plan))
            .collect::<Result<Vec<_>>>()?;
        let mut per_band: Vec<Vec<TrialMoments>> =
            (0..plan.n_bands()).map(|_| Vec::with_capacity(per_trial.len())).collect();
        for trial in per_trial {
            for (b, m) in trial.into_iter().enumerate() {
                per_band[b].push(m);
            }
        }
        Ok(BandMoments {
            bands: bank.bands.clone(),
            labels: dataset.labels(),
            n_channels: dataset.n_channels(),
            per_band,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn n_trials(&self) -> usize {
        self.labels.len()
    }
}

/// Moments of one trial in every band of a plan.
pub fn trial_band_moments(trial: &Trial, plan: &BankPlan) -> Result<Vec<TrialMoments>> {
    (0..plan.n_bands())
        .map(|b| TrialMoments::from_trial(&plan.band(b).apply_trial(trial)?))
        .collect()
}

/// Fits CSP from cached moments of the given trials.
pub fn fit_csp_moments(
    class_a: &[&TrialMoments],
    class_b: &[&TrialMoments],
    m: usize,
    band: (f64, f64),
) -> Result<CspModel> {
    let ca = mean_covariance(class_a.iter().map(|t| &t.normalized))?;
    let cb = mean_covariance(class_b.iter().map(|t| &t.normalized))?;
    fit_csp_covariances(&ca, &cb, m, band)
}

mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(serde::de::Error::custom("ragged filter matrix"));
        }
        Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use std::f64::consts::PI;

    fn two_tone(amp0: f64, amp1: f64, len: usize) -> Trial {
        // Full periods of sin and cos are orthogonal with equal energy.
        let samples = Array2::from_shape_fn((2, len), |(c, i)| {
            let phase = 2.0 * PI * 4.0 * i as f64 / len as f64;
            if c == 0 {
                amp0 * phase.sin()
            } else {
                amp1 * phase.cos()
            }
        });
        Trial::new(0, samples, 100.0)
    }

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn orthogonal_equal_power_rows_give_half_identity() {
        let c = trial_covariance(&two_tone(1.0, 1.0, 64)).unwrap();
        let expected = DMatrix::from_diagonal_element(2, 2, 0.5);
        assert!(frob(&(c - expected)) < 1e-12);
    }

    #[test]
    fn trial_covariance_has_unit_trace() {
        let t = Trial::new(0, array![[1.0, -3.0, 2.0], [0.5, 0.2, 7.0], [4.0, 1.0, 1.0]], 1.0);
        assert!((trial_covariance(&t).unwrap().trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_channel_gives_rank_one() {
        let t = Trial::new(0, array![[1.0, -3.0, 2.0, 5.0], [1.0, -3.0, 2.0, 5.0]], 1.0);
        let c = trial_covariance(&t).unwrap();
        let eig = SymmetricEigen::new(c);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert!(vals[0].abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_trial_is_an_error() {
        let t = Trial::new(0, Array2::zeros((2, 5)), 1.0);
        assert!(matches!(trial_covariance(&t), Err(Error::Singular(_))));
    }

    #[test]
    fn class_covariance_is_mean() {
        let a = Trial::new(0, array![[1.0, -1.0], [0.0, 0.0]], 1.0);
        let b = Trial::new(0, array![[0.0, 0.0], [2.0, 2.0]], 1.0);
        let c = class_covariance(&[&a, &b]).unwrap();
        assert!(frob(&(c - DMatrix::from_diagonal_element(2, 2, 0.5))) < 1e-15);
        let single = class_covariance(&[&a]).unwrap();
        assert_eq!(single, trial_covariance(&a).unwrap());
        assert!(class_covariance(&[]).is_err());
    }

    #[test]
    fn closed_form_two_by_two() {
        let a = two_tone(2f64.sqrt(), 1.0, 64);
        let b = two_tone(1.0, 2f64.sqrt(), 64);
        let model = fit_csp(&[&a], &[&b], 1, (1.0, 2.0)).unwrap();
        assert!((model.eigenvalues[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((model.eigenvalues[1] - 1.0 / 3.0).abs() < 1e-9);
        // Axis aligned up to scale: first filter picks channel 0.
        assert!(model.filters[(0, 1)].abs() < 1e-6 * model.filters[(0, 0)].abs());
        assert!(model.filters[(1, 0)].abs() < 1e-6 * model.filters[(1, 1)].abs());
        assert!(model.filters[(0, 0)] > 0.0 && model.filters[(1, 1)] > 0.0);
    }

    #[test]
    fn identical_classes_give_half() {
        let t = Trial::new(0, array![[1.0, -3.0, 2.0, 0.1], [0.5, 0.2, 7.0, -1.0], [4.0, 1.0, 1.0, 2.0]], 1.0);
        let u = Trial::new(0, array![[0.0, 1.0, 2.0, -4.0], [3.0, -0.2, 1.0, 1.0], [1.0, 1.0, -1.0, 2.0]], 1.0);
        let model = fit_csp(&[&t, &u], &[&t, &u], 1, (1.0, 2.0)).unwrap();
        for l in model.eigenvalues {
            assert!((l - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn m_too_large_is_rejected() {
        let a = two_tone(1.0, 2.0, 16);
        assert!(matches!(
            fit_csp(&[&a], &[&a], 2, (1.0, 2.0)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn singular_composite_is_rejected() {
        let z = DMatrix::zeros(2, 2);
        assert!(matches!(
            fit_csp_covariances(&z, &z, 1, (1.0, 2.0)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn feature_formula() {
        // Identity filters: projected variances are the channel variances.
        let model = CspModel {
            band: (1.0, 2.0),
            m: 1,
            eigenvalues: vec![0.9, 0.1],
            filters: DMatrix::identity(2, 2),
        };
        // Channel variances stand 9 : 1.
        let t = Trial::new(0, array![[3.0, -3.0, 3.0, -3.0], [1.0, -1.0, 1.0, -1.0]], 1.0);
        let f = extract_features(&t, &model).unwrap();
        assert!((f[0] - 0.9f64.ln()).abs() < 1e-12);
        assert!((f[1] - 0.1f64.ln()).abs() < 1e-12);
        let moments = TrialMoments::from_trial(&t).unwrap();
        let g = features_from_moments(&moments, &model).unwrap();
        assert!((f[0] - g[0]).abs() < 1e-12 && (f[1] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn rows_serialization_round_trips() {
        let a = two_tone(2.0, 1.0, 32);
        let b = two_tone(1.0, 2.0, 32);
        let model = fit_csp(&[&a], &[&b], 1, (8.0, 10.0)).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        assert!(json.contains("\"filters\":[["));
        let back: CspModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}
