//! Labeled multichannel epochs, their on-disk layout, and stratified splitting.
//!
//! A dataset directory holds two files:
//!
//! * `manifest.json`: sample rate, channel and class names, and one record
//!   per trial with its label, sample count and byte offset into the payload.
//! * `trials.bin`: the trial payloads back to back. Each payload is
//!   `channels × n_samples` little-endian `f32`, channel-major (all samples of
//!   channel 0, then channel 1, ...).
//!
//! Samples are held as `f64` in memory and stored as `f32` on disk, so a
//! round-trip is exact for any value representable in `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIALS_FILE: &str = "trials.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub label: usize,
    /// channels × time, microvolts.
    pub samples: Array2<f64>,
    pub sample_rate: f64,
}

impl Trial {
    pub fn new(label: usize, samples: Array2<f64>, sample_rate: f64) -> Self {
        Trial {
            label,
            samples,
            sample_rate,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
    pub trials: Vec<Trial>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        sample_rate: f64,
        channel_names: Vec<String>,
        class_names: Vec<String>,
        trials: Vec<Trial>,
    ) -> Result<Self> {
        let dataset = Dataset {
            sample_rate,
            channel_names,
            class_names,
            trials,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::InvalidDataset(format!(
                "sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if self.channel_names.is_empty() {
            return Err(Error::InvalidDataset("no channels".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidDataset("no classes".into()));
        }
        if self.trials.is_empty() {
            return Err(Error::InvalidDataset("no trials".into()));
        }
        let n_channels = self.channel_names.len();
        let mut counts = vec![0usize; self.class_names.len()];
        for (i, trial) in self.trials.iter().enumerate() {
            if trial.n_channels() != n_channels {
                return Err(Error::DimensionMismatch(format!(
                    "trial {i} has {} channels, dataset declares {n_channels}",
                    trial.n_channels()
                )));
            }
            if trial.n_samples() == 0 {
                return Err(Error::InvalidDataset(format!("trial {i} has no samples")));
            }
            if trial.sample_rate != self.sample_rate {
                return Err(Error::InvalidDataset(format!(
                    "trial {i} sample rate {} differs from dataset rate {}",
                    trial.sample_rate, self.sample_rate
                )));
            }
            if trial.label >= counts.len() {
                return Err(Error::InvalidDataset(format!(
                    "trial {i} label {} out of range for {} classes",
                    trial.label,
                    counts.len()
                )));
            }
            if trial.samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { trial: i });
            }
            counts[trial.label] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDataset(format!(
                "class {empty} ({}) has no trials",
                self.class_names[empty]
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }

    /// Resolves a class given by name or by index.
    pub fn class_index(&self, name_or_index: &str) -> Result<usize> {
        if let Some(i) = self.class_names.iter().position(|n| n == name_or_index) {
            return Ok(i);
        }
        match name_or_index.parse::<usize>() {
            Ok(i) if i < self.n_classes() => Ok(i),
            _ => Err(Error::InvalidParameter(format!(
                "unknown class '{name_or_index}' (classes: {})",
                self.class_names.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    sample_rate: f64,
    channel_names: Vec<String>,
    class_names: Vec<String>,
    trials: Vec<TrialRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialRecord {
    label: usize,
    n_samples: usize,
    offset_bytes: u64,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut records = Vec::with_capacity(dataset.trials.len());
    let mut offset = 0u64;
    let bin_path = dir.join(TRIALS_FILE);
    let file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut out = BufWriter::new(file);
    for trial in &dataset.trials {
        records.push(TrialRecord {
            label: trial.label,
            n_samples: trial.n_samples(),
            offset_bytes: offset,
        });
        for row in trial.samples.rows() {
            for &v in row {
                out.write_all(&(v as f32).to_le_bytes())
                    .map_err(|e| Error::io(&bin_path, e))?;
            }
        }
        offset += (trial.samples.len() * 4) as u64;
    }
    out.flush().map_err(|e| Error::io(&bin_path, e))?;

    let manifest = Manifest {
        sample_rate: dataset.sample_rate,
        channel_names: dataset.channel_names.clone(),
        class_names: dataset.class_names.clone(),
        trials: records,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let bin_path = dir.join(TRIALS_FILE);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;

    let n_channels = manifest.channel_names.len();
    if n_channels == 0 {
        return Err(Error::InvalidDataset("manifest lists no channels".into()));
    }
    let mut trials = Vec::with_capacity(manifest.trials.len());
    let mut expected_len = 0u64;
    for (i, rec) in manifest.trials.iter().enumerate() {
        let n_values = n_channels * rec.n_samples;
        let size = (n_values * 4) as u64;
        let end = rec.offset_bytes.saturating_add(size);
        if end > bytes.len() as u64 {
            return Err(Error::DimensionMismatch(format!(
                "trial {i} needs bytes {}..{end} but {TRIALS_FILE} holds {}",
                rec.offset_bytes,
                bytes.len()
            )));
        }
        let payload = &bytes[rec.offset_bytes as usize..end as usize];
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { trial: i });
        }
        let samples = Array2::from_shape_vec((n_channels, rec.n_samples), values)
            .map_err(|e| Error::DimensionMismatch(format!("trial {i}: {e}")))?;
        trials.push(Trial::new(rec.label, samples, manifest.sample_rate));
        expected_len += size;
    }
    if expected_len != bytes.len() as u64 {
        return Err(Error::DimensionMismatch(format!(
            "manifest describes {expected_len} payload bytes but {TRIALS_FILE} holds {}",
            bytes.len()
        )));
    }
    Dataset::new(
        manifest.sample_rate,
        manifest.channel_names,
        manifest.class_names,
        trials,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Number of test trials drawn from a class of `count` trials.
///
/// Round half up, at least one.
pub fn test_count(count: usize, test_fraction: f64) -> usize {
    // The small epsilon keeps products such as 0.3 * 5 = 1.4999999999999998
    // on the intended side of the half.
    ((count as f64 * test_fraction + 0.5 + 1e-9).floor() as usize).max(1)
}

pub fn stratified_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    stratified_split_labels(&dataset.labels(), test_fraction, seed)
}

/// Stratified holdout over an arbitrary label vector. Returned indices are
/// positions in `labels`, each list sorted ascending.
pub fn stratified_split_labels(
    labels: &[usize],
    test_fraction: f64,
    seed: u64,
) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in group_by_label(labels) {
        let n_test = test_count(members.len(), test_fraction);
        if n_test >= members.len() {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} trials; need at least one for training and one for testing",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, &[class as u64]));
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Stratified k-fold assignment: members of each class are shuffled, then
/// dealt round-robin over the folds. The dealing position carries over from
/// one class to the next so fold sizes stay balanced overall.
///
/// Returns the fold index of every position in `labels`.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for (class, mut members) in group_by_label(labels) {
        if members.len() < folds {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} samples, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, &[class as u64]));
        for m in members {
            assignment[m] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

fn group_by_label(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy(per_class: usize, classes: usize) -> Dataset {
        let trials = (0..per_class * classes)
            .map(|i| Trial::new(i % classes, Array2::from_elem((2, 4), i as f64), 100.0))
            .collect();
        Dataset::new(
            100.0,
            vec!["C3".into(), "C4".into()],
            (0..classes).map(|c| format!("c{c}")).collect(),
            trials,
        )
        .unwrap()
    }

    #[test]
    fn rejects_empty_trial_list() {
        let ds = Dataset {
            sample_rate: 100.0,
            channel_names: vec!["C3".into()],
            class_names: vec!["a".into()],
            trials: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_dataset(&ds, dir.path()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn rejects_class_without_trials() {
        let trial = Trial::new(0, array![[1.0, 2.0]], 10.0);
        let err = Dataset::new(10.0, vec!["x".into()], vec!["a".into(), "b".into()], vec![trial]);
        assert!(matches!(err, Err(Error::InvalidDataset(_))));
    }

    #[test]
    fn rejects_non_finite_samples() {
        let trial = Trial::new(0, array![[1.0, f64::NAN]], 10.0);
        let err = Dataset::new(10.0, vec!["x".into()], vec!["a".into()], vec![trial]);
        assert!(matches!(err, Err(Error::NonFinite { trial: 0 })));
    }

    #[test]
    fn split_takes_exactly_two_of_ten() {
        let ds = toy(10, 4);
        for seed in 0..5 {
            let split = stratified_split(&ds, 0.2, seed).unwrap();
            let mut per_class = [0; 4];
            for &i in &split.test {
                per_class[ds.trials[i].label] += 1;
            }
            assert_eq!(per_class, [2; 4]);
            assert_eq!(split.train.len() + split.test.len(), 40);
        }
    }

    #[test]
    fn split_of_five_has_one_test_trial() {
        let ds = toy(5, 4);
        let split = stratified_split(&ds, 0.2, 11).unwrap();
        assert_eq!(split.test.len(), 4);
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(10, 4);
        assert_eq!(
            stratified_split(&ds, 0.2, 3).unwrap(),
            stratified_split(&ds, 0.2, 3).unwrap()
        );
    }

    #[test]
    fn split_needs_a_training_trial() {
        let ds = toy(1, 2);
        assert!(matches!(
            stratified_split(&ds, 0.2, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(test_count(10, 0.25), 3);
        assert_eq!(test_count(5, 0.3), 2);
        assert_eq!(test_count(3, 0.1), 1);
        assert_eq!(test_count(40, 0.2), 8);
    }

    #[test]
    fn folds_are_balanced() {
        let labels: Vec<usize> = (0..23).map(|i| i % 2).collect();
        let folds = stratified_folds(&labels, 5, 9).unwrap();
        for k in 0..5 {
            let size = folds.iter().filter(|&&f| f == k).count();
            assert!((4..=5).contains(&size));
            for c in 0..2 {
                let n = (0..23).filter(|&i| folds[i] == k && labels[i] == c).count();
                assert!((2..=3).contains(&n));
            }
        }
    }

    #[test]
    fn too_few_samples_for_folds() {
        assert!(stratified_folds(&[0, 0, 1, 1], 3, 0).is_err());
    }
}
