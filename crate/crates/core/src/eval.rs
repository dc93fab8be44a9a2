//! Confusion-matrix metrics and the repeated stratified holdout harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::csp::BandMoments;
use crate::ecoc::{self, CachedTrial, ModelMeta, PairModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::trialstore::{stratified_split_labels, Dataset};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(p: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; p]; p],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], p: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} true labels, {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(p);
        for (&t, &y) in truth.iter().zip(predicted) {
            if t >= p || y >= p {
                return Err(Error::InvalidParameter(format!("label out of range for {p} classes")));
            }
            cm.counts[t][y] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    fn nonempty_total(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::InsufficientData("empty confusion matrix".into())),
            n => Ok(n as f64),
        }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.nonempty_total()?)
}

/// `(p_o − p_e) / (1 − p_e)`; 0 when chance agreement is already 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty_total()?;
    let p = cm.counts.len();
    let observed = cm.trace() as f64 / n;
    let expected: f64 = (0..p)
        .map(|c| {
            let row: usize = cm.counts[c].iter().sum();
            let col: usize = cm.counts.iter().map(|r| r[c]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if expected >= 1.0 {
        return Ok(0.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// n − 1 denominator; 0 for a single value.
    pub sd: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Summary { mean, sd, max }
    }

    /// `0.74±0.05 (0.86)`
    pub fn display(&self) -> String {
        format!("{:.2}±{:.2} ({:.2})", self.mean, self.sd, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Multiclass,
    Pair(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub name: String,
    pub classes: Vec<String>,
    pub accuracies: Vec<f64>,
    pub accuracy: Summary,
    pub kappas: Vec<f64>,
    pub kappa: Summary,
    pub confusion: Vec<ConfusionMatrix>,
}

/// Repeated stratified holdout of one task on precomputed band moments.
/// Every fit sees only the training indices of its repetition.
pub fn repeated_holdout_moments(
    moments: &BandMoments,
    meta: &ModelMeta,
    cfg: &PipelineConfig,
    task: Task,
) -> Result<RunReport> {
    cfg.validate()?;
    let labels = &moments.labels;
    let (pool, classes): (Vec<usize>, Vec<usize>) = match task {
        Task::Multiclass => ((0..labels.len()).collect(), (0..meta.class_names.len()).collect()),
        Task::Pair(a, b) => (
            (0..labels.len()).filter(|&i| labels[i] == a || labels[i] == b).collect(),
            vec![a, b],
        ),
    };
    let code = match task {
        Task::Multiclass => Some(ecoc::exhaustive_code(meta.class_names.len())?),
        Task::Pair(..) => None,
    };
    // Position of each class in the confusion matrix.
    let slot = |c: usize| classes.iter().position(|&k| k == c).expect("class in task");

    let mut accuracies = Vec::with_capacity(cfg.repetitions);
    let mut kappas = Vec::with_capacity(cfg.repetitions);
    let mut confusion = Vec::with_capacity(cfg.repetitions);
    for r in 0..cfg.repetitions as u64 {
        let pool_labels: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
        let split = stratified_split_labels(
            &pool_labels,
            cfg.test_fraction,
            rng::derive_seed(cfg.seed, &[r, 0]),
        )?;
        let train: Vec<usize> = split.train.iter().map(|&i| pool[i]).collect();
        let test: Vec<usize> = split.test.iter().map(|&i| pool[i]).collect();
        let fit_seed = rng::derive_seed(cfg.seed, &[r, 1]);

        let predicted: Vec<usize> = match (&task, &code) {
            (Task::Multiclass, Some(code)) => {
                let model = ecoc::fit_ecoc_moments(moments, meta, &train, code, cfg, fit_seed)?;
                test.iter()
                    .map(|&t| model.decide(&CachedTrial { moments, trial: t }).map(|d| d.class))
                    .collect::<Result<_>>()?
            }
            (Task::Pair(a, b), _) => {
                let model = PairModel::fit(moments, meta, (*a, *b), &train, cfg, fit_seed)?;
                test.iter()
                    .map(|&t| model.decide(&CachedTrial { moments, trial: t }))
                    .collect::<Result<_>>()?
            }
            _ => unreachable!("multiclass always carries a code"),
        };
        let truth: Vec<usize> = test.iter().map(|&t| slot(labels[t])).collect();
        let predicted: Vec<usize> = predicted.into_iter().map(slot).collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &predicted, classes.len())?;
        accuracies.push(accuracy(&cm)?);
        kappas.push(cohen_kappa(&cm)?);
        confusion.push(cm);
    }

    let names: Vec<String> = classes.iter().map(|&c| meta.class_names[c].clone()).collect();
    Ok(RunReport {
        task,
        name: match task {
            Task::Multiclass => "multiclass".into(),
            Task::Pair(..) => format!("{} vs {}", names[0], names[1]),
        },
        classes: names,
        accuracy: Summary::of(&accuracies),
        accuracies,
        kappa: Summary::of(&kappas),
        kappas,
        confusion,
    })
}

pub fn repeated_holdout(dataset: &Dataset, cfg: &PipelineConfig, task: Task) -> Result<RunReport> {
    let bank = cfg.bank(dataset.sample_rate)?;
    let moments = BandMoments::from_dataset(dataset, &bank)?;
    repeated_holdout_moments(&moments, &ModelMeta::of(dataset, &bank), cfg, task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: PipelineConfig,
    /// ECOC over all classes; absent for two-class datasets.
    pub multiclass: Option<RunReport>,
    /// Class 0 (rest) against each other class.
    pub rest_vs_finger: Vec<RunReport>,
    /// Every pair among classes 1.., in index order.
    pub pairwise: Vec<RunReport>,
}

pub fn evaluate(dataset: &Dataset, cfg: &PipelineConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let bank = cfg.bank(dataset.sample_rate)?;
    let moments = BandMoments::from_dataset(dataset, &bank)?;
    let meta = ModelMeta::of(dataset, &bank);
    let p = dataset.n_classes();
    let multiclass = if p >= 3 {
        Some(repeated_holdout_moments(&moments, &meta, cfg, Task::Multiclass)?)
    } else {
        None
    };
    let (mut rest_vs_finger, mut pairwise) = (Vec::new(), Vec::new());
    if cfg.binary_tables {
        for c in 1..p {
            rest_vs_finger.push(repeated_holdout_moments(&moments, &meta, cfg, Task::Pair(0, c))?);
        }
        for a in 1..p {
            for b in a + 1..p {
                pairwise.push(repeated_holdout_moments(&moments, &meta, cfg, Task::Pair(a, b))?);
            }
        }
    }
    Ok(EvaluationReport {
        config: cfg.clone(),
        multiclass,
        rest_vs_finger,
        pairwise,
    })
}

fn accuracy_table(runs: &[RunReport]) -> String {
    let mut out = String::from("pair,mean,sd,max,mean_sd_max\n");
    for r in runs {
        let s = r.accuracy;
        let _ = writeln!(out, "{},{},{},{},{}", r.name, s.mean, s.sd, s.max, s.display());
    }
    out
}

/// Writes `report.json`, `rest_vs_finger.csv`, `pairwise.csv` and
/// `kappa.csv` into `dir`. `subject` labels the kappa row.
pub fn write_report(report: &EvaluationReport, subject: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write("report.json", json)?;
    write("rest_vs_finger.csv", accuracy_table(&report.rest_vs_finger))?;
    write("pairwise.csv", accuracy_table(&report.pairwise))?;
    let mut kappa = String::from("subject,kappa_mean,kappa_sd,kappa_max,accuracy_mean\n");
    if let Some(m) = &report.multiclass {
        let _ = writeln!(
            kappa,
            "{subject},{},{},{},{}",
            m.kappa.mean, m.kappa.sd, m.kappa.max, m.accuracy.mean
        );
    }
    write("kappa.csv", kappa)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[usize]]) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&cm(&[&[5, 0], &[0, 3]])).unwrap(), 1.0);
        assert_eq!(accuracy(&cm(&[&[3, 1], &[1, 3]])).unwrap(), 0.75);
        assert_eq!(accuracy(&cm(&[&[0, 4], &[2, 0]])).unwrap(), 0.0);
        assert!(accuracy(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn kappa_examples() {
        let perfect = cm(&[&[4, 0, 0, 0], &[0, 2, 0, 0], &[0, 0, 7, 0], &[0, 0, 0, 1]]);
        assert_eq!(cohen_kappa(&perfect).unwrap(), 1.0);
        assert!(cohen_kappa(&cm(&[&[25, 25], &[25, 25]])).unwrap().abs() < 1e-15);
        assert!((cohen_kappa(&cm(&[&[40, 10], &[20, 30]])).unwrap() - 0.4).abs() < 1e-12);
        assert!(cohen_kappa(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn kappa_is_zero_when_chance_is_certain() {
        assert_eq!(cohen_kappa(&cm(&[&[9, 0], &[0, 0]])).unwrap(), 0.0);
    }

    #[test]
    fn kappa_one_iff_diagonal() {
        assert!(cohen_kappa(&cm(&[&[3, 0, 0], &[0, 3, 1], &[0, 0, 3]])).unwrap() < 1.0);
        assert_eq!(cohen_kappa(&cm(&[&[3, 0, 0], &[0, 3, 0], &[0, 0, 2]])).unwrap(), 1.0);
    }

    #[test]
    fn summary_conventions() {
        let s = Summary::of(&[0.5]);
        assert_eq!((s.mean, s.sd, s.max), (0.5, 0.0, 0.5));
        let s = Summary::of(&[0.6, 0.8, 0.7]);
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!((s.sd - 0.1).abs() < 1e-12);
        assert_eq!(s.max, 0.8);
        assert_eq!(s.display(), "0.70±0.10 (0.80)");
    }

    #[test]
    fn confusion_from_predictions() {
        let c = ConfusionMatrix::from_predictions(&[0, 1, 1, 2], &[0, 2, 1, 2], 3).unwrap();
        assert_eq!(c.counts, vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 1]]);
        assert!(ConfusionMatrix::from_predictions(&[0], &[3], 3).is_err());
    }
}
