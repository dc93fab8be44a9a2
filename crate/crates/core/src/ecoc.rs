//! Exhaustive-code ECOC over per-column binary pipelines.
//!
//! For p classes the code has `2^(p−1) − 1` columns. Row 0 is all ones and
//! row i ≥ 1 alternates runs of `2^(p−1−i)` zeros and ones, starting with
//! zeros. Each column defines a binary problem (S⁺ = classes with a 1), which
//! gets its own band selection, CSP filters and Extra-Trees forest. A trial
//! is decoded to the class row nearest in Hamming distance to the column
//! predictions, the lowest class index winning ties.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandselect::{self, BandScore, BinaryTask};
use crate::config::PipelineConfig;
use crate::csp::{self, BandMoments, CspModel, TrialMoments};
use crate::dsp::{BandDecomposition, BankPlan, FilterBank};
use crate::error::{Error, Result};
use crate::extratrees::{self, EtForest};
use crate::rng;
use crate::trialstore::{Dataset, Trial};

pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMatrix {
    /// p rows of q bits, each 0 or 1.
    pub bits: Vec<Vec<u8>>,
}

pub fn exhaustive_code(p: usize) -> Result<CodeMatrix> {
    if !(3..=8).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "exhaustive code supports 3 to 8 classes, got {p}"
        )));
    }
    let q = (1usize << (p - 1)) - 1;
    let bits = (0..p)
        .map(|i| {
            if i == 0 {
                vec![1; q]
            } else {
                let run = 1usize << (p - 1 - i);
                (0..q).map(|j| ((j / run) % 2) as u8).collect()
            }
        })
        .collect();
    Ok(CodeMatrix { bits })
}

pub fn hamming(a: &[u8], b: &[u8]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "codewords of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

impl CodeMatrix {
    pub fn n_classes(&self) -> usize {
        self.bits.len()
    }

    pub fn code_len(&self) -> usize {
        self.bits.first().map_or(0, Vec::len)
    }

    /// Membership of each class in S⁺ for column `j`.
    pub fn column(&self, j: usize) -> Vec<bool> {
        self.bits.iter().map(|row| row[j] == 1).collect()
    }

    pub fn min_distance(&self) -> usize {
        let mut best = usize::MAX;
        for a in 0..self.n_classes() {
            for b in a + 1..self.n_classes() {
                best = best.min(hamming(&self.bits[a], &self.bits[b]).expect("square code"));
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.code_len();
        let p = self.n_classes();
        if p < 2 || q == 0 || self.bits.iter().any(|r| r.len() != q || r.iter().any(|&b| b > 1)) {
            return Err(Error::DegenerateCode("code rows must be equal-length bit strings".into()));
        }
        for a in 0..p {
            for b in a + 1..p {
                if self.bits[a] == self.bits[b] {
                    return Err(Error::DegenerateCode(format!("rows {a} and {b} coincide")));
                }
            }
        }
        let cols: Vec<Vec<bool>> = (0..q).map(|j| self.column(j)).collect();
        for (j, c) in cols.iter().enumerate() {
            if c.iter().all(|&b| b) || c.iter().all(|&b| !b) {
                return Err(Error::DegenerateCode(format!("column {j} is constant")));
            }
            for (k, d) in cols.iter().enumerate().skip(j + 1) {
                let complement = c.iter().zip(d).all(|(x, y)| x != y);
                if c == d || complement {
                    return Err(Error::DegenerateCode(format!(
                        "columns {j} and {k} are identical or complementary"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nearest class row and its distance; lowest index on ties.
    pub fn decode(&self, codeword: &[u8]) -> Result<(usize, usize)> {
        let mut best = (0, usize::MAX);
        for (c, row) in self.bits.iter().enumerate() {
            let d = hamming(codeword, row)?;
            if d < best.1 {
                best = (c, d);
            }
        }
        Ok(best)
    }
}

/// Access to one trial's band moments, by bank band index.
pub trait BandSource {
    fn band_moments(&self, band: usize) -> Result<&TrialMoments>;
}

/// A trial inside a precomputed [`BandMoments`].
pub struct CachedTrial<'a> {
    pub moments: &'a BandMoments,
    pub trial: usize,
}

impl BandSource for CachedTrial<'_> {
    fn band_moments(&self, band: usize) -> Result<&TrialMoments> {
        self.moments
            .per_band
            .get(band)
            .and_then(|b| b.get(self.trial))
            .ok_or_else(|| Error::DimensionMismatch(format!("no moments for band {band}")))
    }
}

/// Moments computed only for the bands a model needs.
pub struct SparseBands(pub Vec<Option<TrialMoments>>);

impl BandSource for SparseBands {
    fn band_moments(&self, band: usize) -> Result<&TrialMoments> {
        self.0
            .get(band)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::DimensionMismatch(format!("band {band} was not filtered")))
    }
}

/// One binary decoder: selected bands, their CSP filters, and a forest on
/// the concatenated log-variance features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryModel {
    pub scores: Vec<BandScore>,
    pub threshold: f64,
    /// Indices into the filter bank.
    pub selected: Vec<usize>,
    /// Parallel to `selected`.
    pub csp: Vec<CspModel>,
    pub forest: EtForest,
}

impl BinaryModel {
    pub fn fit(moments: &BandMoments, task: &BinaryTask, cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let (pos, neg) = task.counts();
        if pos == 0 || neg == 0 {
            return Err(Error::DegenerateCode(format!(
                "binary problem has {pos} positive and {neg} negative trials"
            )));
        }
        let score_cfg = cfg.score_config();
        let scores = bandselect::score_bands(moments, task, &score_cfg, rng::derive_seed(seed, &[0]))?;
        let selection = bandselect::select_bands(&scores)?;

        let csp = selection
            .selected
            .iter()
            .map(|&b| {
                let band = &moments.per_band[b];
                let split = |want: bool| -> Vec<&TrialMoments> {
                    task.trials
                        .iter()
                        .zip(&task.positive)
                        .filter(|(_, &p)| p == want)
                        .map(|(&t, _)| &band[t])
                        .collect()
                };
                csp::fit_csp_moments(&split(true), &split(false), cfg.csp_m, moments.bands[b])
            })
            .collect::<Result<Vec<_>>>()?;

        let mut model = BinaryModel {
            scores,
            threshold: selection.threshold,
            selected: selection.selected,
            csp,
            forest: EtForest {
                trees: vec![],
                params: extratrees::EtParams { k: 1, n_min: 2, m: 1, seed },
                feature_dim: 0,
            },
        };
        let d = model.feature_dim();
        let mut x = Array2::zeros((task.trials.len(), d));
        for (r, &t) in task.trials.iter().enumerate() {
            let f = model.features(&CachedTrial { moments, trial: t })?;
            x.row_mut(r).assign(&ndarray::Array1::from(f));
        }
        let grid = cfg.et_grid(d);
        let params = extratrees::tune(&x, &task.positive, &grid, cfg.cv_folds, rng::derive_seed(seed, &[1]))?;
        model.forest = extratrees::fit(&x, &task.positive, &params)?;
        Ok(model)
    }

    pub fn feature_dim(&self) -> usize {
        self.csp.iter().map(CspModel::n_features).sum()
    }

    pub fn features(&self, source: &dyn BandSource) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.feature_dim());
        for (&b, model) in self.selected.iter().zip(&self.csp) {
            out.extend(csp::features_from_moments(source.band_moments(b)?, model)?);
        }
        Ok(out)
    }

    /// `true` for S⁺.
    pub fn predict(&self, source: &dyn BandSource) -> Result<bool> {
        Ok(self.forest.predict_row(&self.features(source)?))
    }

    fn validate(&self, n_bands: usize) -> Result<()> {
        if self.selected.is_empty() || self.selected.len() != self.csp.len() {
            return Err(Error::InvalidParameter("binary model has no usable bands".into()));
        }
        if self.selected.iter().any(|&b| b >= n_bands) {
            return Err(Error::InvalidParameter("selected band outside the bank".into()));
        }
        if self.forest.feature_dim != self.feature_dim() {
            return Err(Error::DimensionMismatch(
                "forest input size differs from CSP feature count".into(),
            ));
        }
        self.forest.validate()
    }
}

/// What a model needs to know about the data it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
    pub bank: FilterBank,
}

impl ModelMeta {
    pub fn of(dataset: &Dataset, bank: &FilterBank) -> Self {
        ModelMeta {
            sample_rate: dataset.sample_rate,
            channel_names: dataset.channel_names.clone(),
            class_names: dataset.class_names.clone(),
            bank: bank.clone(),
        }
    }

    fn check_trial(&self, trial: &Trial) -> Result<()> {
        if trial.n_channels() != self.channel_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "trial has {} channels, model was trained on {}",
                trial.n_channels(),
                self.channel_names.len()
            )));
        }
        if (trial.sample_rate - self.sample_rate).abs() > 1e-9 * self.sample_rate {
            return Err(Error::InvalidParameter(format!(
                "trial sampled at {} Hz, model trained at {} Hz",
                trial.sample_rate, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Filters trials into the listed bands only.
    fn band_sources(&self, trials: &[Trial], bands: &[usize]) -> Result<Vec<SparseBands>> {
        let sub = FilterBank {
            bands: bands.iter().map(|&b| self.bank.bands[b]).collect(),
            taps: self.bank.taps,
        };
        let mut plans: Vec<(usize, BankPlan)> = Vec::new();
        trials
            .iter()
            .map(|trial| {
                self.check_trial(trial)?;
                let len = trial.n_samples();
                if !plans.iter().any(|(l, _)| *l == len) {
                    plans.push((len, BankPlan::new(&sub, self.sample_rate, len)?));
                }
                let plan = &plans.iter().find(|(l, _)| *l == len).expect("just inserted").1;
                let moments = csp::trial_band_moments(trial, plan)?;
                let mut sparse: Vec<Option<TrialMoments>> = vec![None; self.bank.bands.len()];
                for (&b, m) in bands.iter().zip(moments) {
                    sparse[b] = Some(m);
                }
                Ok(SparseBands(sparse))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnModel {
    /// Classes forming S⁺ for this column.
    pub positive_classes: Vec<usize>,
    pub model: BinaryModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcocModel {
    pub meta: ModelMeta,
    pub code: CodeMatrix,
    pub columns: Vec<ColumnModel>,
}

/// Result of decoding one trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub class: usize,
    pub codeword: Vec<u8>,
    pub distance: usize,
}

/// Fits every column on the `train` trials of a precomputed moment cache.
pub fn fit_ecoc_moments(
    moments: &BandMoments,
    meta: &ModelMeta,
    train: &[usize],
    code: &CodeMatrix,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<EcocModel> {
    code.validate()?;
    let p = code.n_classes();
    if p != meta.class_names.len() {
        return Err(Error::DimensionMismatch(format!(
            "code has {p} rows, dataset has {} classes",
            meta.class_names.len()
        )));
    }
    let mut present = vec![false; p];
    for &t in train {
        present[moments.labels[t]] = true;
    }
    if let Some(missing) = present.iter().position(|&x| !x) {
        return Err(Error::InsufficientData(format!(
            "class {missing} has no training trials"
        )));
    }
    let columns = (0..code.code_len())
        .into_par_iter()
        .map(|j| {
            let bits = code.column(j);
            let task = BinaryTask::from_column(&moments.labels, &bits, train);
            let model = BinaryModel::fit(moments, &task, cfg, rng::derive_seed(seed, &[j as u64]))?;
            Ok(ColumnModel {
                positive_classes: (0..p).filter(|&c| bits[c]).collect(),
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EcocModel {
        meta: meta.clone(),
        code: code.clone(),
        columns,
    })
}

/// Fits on all trials of a decomposition listed in `train`.
pub fn fit_ecoc(
    decomp: &BandDecomposition,
    train: &[usize],
    code: &CodeMatrix,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<EcocModel> {
    let moments = BandMoments::from_decomposition(decomp)?;
    let meta = ModelMeta::of(
        &decomp.datasets[0],
        &FilterBank {
            bands: decomp.bands.clone(),
            taps: decomp.taps,
        },
    );
    fit_ecoc_moments(&moments, &meta, train, code, cfg, seed)
}

impl EcocModel {
    /// Union of bands any column reads, ascending.
    pub fn used_bands(&self) -> Vec<usize> {
        let mut bands: Vec<usize> = self
            .columns
            .iter()
            .flat_map(|c| c.model.selected.iter().copied())
            .collect();
        bands.sort_unstable();
        bands.dedup();
        bands
    }

    pub fn decide(&self, source: &dyn BandSource) -> Result<Decision> {
        let codeword = self
            .columns
            .iter()
            .map(|c| c.model.predict(source).map(u8::from))
            .collect::<Result<Vec<u8>>>()?;
        let (class, distance) = self.code.decode(&codeword)?;
        Ok(Decision {
            class,
            codeword,
            distance,
        })
    }

    pub fn predict_trials(&self, trials: &[Trial]) -> Result<Vec<usize>> {
        self.meta
            .band_sources(trials, &self.used_bands())?
            .iter()
            .map(|s| self.decide(s).map(|d| d.class))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.code.validate()?;
        if self.columns.len() != self.code.code_len() {
            return Err(Error::InvalidParameter(format!(
                "{} column models for a code of length {}",
                self.columns.len(),
                self.code.code_len()
            )));
        }
        if self.code.n_classes() != self.meta.class_names.len() {
            return Err(Error::DimensionMismatch("code rows differ from class count".into()));
        }
        for c in &self.columns {
            c.model.validate(self.meta.bank.bands.len())?;
        }
        Ok(())
    }
}

pub fn predict_ecoc(model: &EcocModel, trial: &Trial) -> Result<usize> {
    Ok(model.predict_trials(std::slice::from_ref(trial))?[0])
}

/// Binary decoder for one class pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairModel {
    pub meta: ModelMeta,
    /// (class predicted on S⁺, class predicted on S⁻).
    pub classes: (usize, usize),
    pub model: BinaryModel,
}

impl PairModel {
    pub fn fit(
        moments: &BandMoments,
        meta: &ModelMeta,
        classes: (usize, usize),
        within: &[usize],
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Result<Self> {
        let (a, b) = classes;
        if a == b || a >= meta.class_names.len() || b >= meta.class_names.len() {
            return Err(Error::InvalidParameter(format!("invalid class pair ({a}, {b})")));
        }
        let task = BinaryTask::pair(&moments.labels, a, b, Some(within));
        Ok(PairModel {
            meta: meta.clone(),
            classes,
            model: BinaryModel::fit(moments, &task, cfg, seed)?,
        })
    }

    pub fn decide(&self, source: &dyn BandSource) -> Result<usize> {
        Ok(if self.model.predict(source)? {
            self.classes.0
        } else {
            self.classes.1
        })
    }

    pub fn predict_trials(&self, trials: &[Trial]) -> Result<Vec<usize>> {
        self.meta
            .band_sources(trials, &self.model.selected)?
            .iter()
            .map(|s| self.decide(s))
            .collect()
    }
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModelBundle {
    Binary {
        config: PipelineConfig,
        model: PairModel,
    },
    Multiclass {
        config: PipelineConfig,
        model: EcocModel,
    },
}

impl ModelBundle {
    pub fn meta(&self) -> &ModelMeta {
        match self {
            ModelBundle::Binary { model, .. } => &model.meta,
            ModelBundle::Multiclass { model, .. } => &model.meta,
        }
    }

    pub fn predict_trials(&self, trials: &[Trial]) -> Result<Vec<usize>> {
        match self {
            ModelBundle::Binary { model, .. } => model.predict_trials(trials),
            ModelBundle::Multiclass { model, .. } => model.predict_trials(trials),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelBundle::Binary { model, .. } => model.model.validate(model.meta.bank.bands.len()),
            ModelBundle::Multiclass { model, .. } => model.validate(),
        }
    }
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MODEL_FILE);
    let mut text = serde_json::to_string_pretty(bundle)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bundle: ModelBundle = serde_json::from_str(&text)?;
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Vec<u8> {
        s.bytes().map(|b| b - b'0').collect()
    }

    #[test]
    fn four_class_code() {
        let code = exhaustive_code(4).unwrap();
        let rows: Vec<Vec<u8>> = ["1111111", "0000111", "0011001", "0101010"].iter().map(|s| parse(s)).collect();
        assert_eq!(code.bits, rows);
        assert_eq!(code.code_len(), 7);
        assert_eq!(code.min_distance(), 4);
        code.validate().unwrap();
    }

    #[test]
    fn three_class_code() {
        let code = exhaustive_code(3).unwrap();
        assert_eq!(code.bits, vec![parse("111"), parse("001"), parse("010")]);
    }

    #[test]
    fn class_count_range() {
        assert!(exhaustive_code(2).is_err());
        assert!(exhaustive_code(9).is_err());
        assert_eq!(exhaustive_code(8).unwrap().code_len(), 127);
    }

    #[test]
    fn printed_table_row_is_degenerate() {
        // 0001111 for class 2 makes column 3 all ones.
        let code = CodeMatrix {
            bits: ["1111111", "0001111", "0011001", "0101010"].iter().map(|s| parse(s)).collect(),
        };
        assert!(matches!(code.validate(), Err(Error::DegenerateCode(_))));
        assert_eq!(code.column(3), vec![true; 4]);
    }

    #[test]
    fn hamming_basics() {
        assert_eq!(hamming(&parse("1111111"), &parse("0000111")).unwrap(), 4);
        assert_eq!(hamming(&parse("0110"), &parse("0110")).unwrap(), 0);
        assert_eq!(
            hamming(&parse("0110"), &parse("1011")).unwrap(),
            hamming(&parse("1011"), &parse("0110")).unwrap()
        );
        assert!(hamming(&parse("01"), &parse("011")).is_err());
    }

    #[test]
    fn decode_examples() {
        let code = exhaustive_code(4).unwrap();
        assert_eq!(code.decode(&parse("0011001")).unwrap(), (2, 0));
        assert_eq!(code.decode(&parse("1111110")).unwrap(), (0, 1));
        // Distances to the rows are (4, 4, 2, 2): the tie goes to class 2.
        let word = parse("0011010");
        let d: Vec<usize> = code.bits.iter().map(|r| hamming(&word, r).unwrap()).collect();
        assert_eq!(d, vec![4, 4, 2, 2]);
        assert_eq!(code.decode(&word).unwrap(), (2, 2));
    }
}
