//! Synthetic EEG with planted, class-specific, band-limited spatial sources.
//!
//! A trial of class c is
//!
//! ```text
//! X = Σ_s a_{c,s} · x_{c,s}(t)ᵀ + white noise
//! ```
//!
//! where `x_{c,s}` is white Gaussian noise passed through the zero-phase FIR
//! bandpass of the [`dsp`](crate::dsp) module and scaled to the configured
//! variance, and `a_{c,s}` is a unit-norm mixing vector fixed per class.
//! Source realizations are independent per trial. Samples are rounded to
//! `f32` so generated datasets survive the on-disk format unchanged.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, ZeroPhasePlan};
use crate::error::{Error, Result};
use crate::rng;
use crate::trialstore::{Dataset, Trial};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub band_low: f64,
    pub band_high: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub n_channels: usize,
    pub sample_rate: f64,
    /// Seconds.
    pub trial_duration: f64,
    /// Per class, the planted sources.
    pub class_sources: Vec<Vec<SourceSpec>>,
    pub mixing_seed: u64,
    pub noise_variance: f64,
    pub noise_seed: u64,
    /// Draw mixing vectors per source index only, identical across classes.
    #[serde(default)]
    pub shared_mixing: bool,
    /// Explicit mixing vectors `[class][source][channel]`, normalized to
    /// unit length. Overrides the seeded draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing_vectors: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl SynthConfig {
    /// Four classes (rest, thumb, index, middle), each with one source of
    /// `source_variance` in `band` and its own mixing vector.
    pub fn planted(
        trials_per_class: usize,
        n_channels: usize,
        band: (f64, f64),
        source_variance: f64,
        noise_variance: f64,
        seed: u64,
    ) -> Self {
        SynthConfig {
            n_classes: 4,
            trials_per_class,
            n_channels,
            sample_rate: 512.0,
            trial_duration: 3.0,
            class_sources: vec![
                vec![SourceSpec {
                    band_low: band.0,
                    band_high: band.1,
                    variance: source_variance,
                }];
                4
            ],
            mixing_seed: rng::derive_seed(seed, &[0]),
            noise_variance,
            noise_seed: rng::derive_seed(seed, &[1]),
            shared_mixing: false,
            mixing_vectors: None,
            class_names: None,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.trial_duration * self.sample_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_channels == 0 {
            return bad("need at least one channel".into());
        }
        if self.trials_per_class == 0 {
            return bad("trials_per_class must be positive".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("invalid sample rate {}", self.sample_rate));
        }
        if self.n_samples() < 2 {
            return bad(format!("trial duration {} s is too short", self.trial_duration));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad(format!("noise variance must be ≥ 0, got {}", self.noise_variance));
        }
        if self.class_sources.len() != self.n_classes {
            return bad(format!(
                "class_sources lists {} classes, n_classes is {}",
                self.class_sources.len(),
                self.n_classes
            ));
        }
        let nyquist = self.sample_rate / 2.0;
        for (c, sources) in self.class_sources.iter().enumerate() {
            for s in sources {
                if !(s.band_low > 0.0 && s.band_low < s.band_high && s.band_high < nyquist) {
                    return bad(format!(
                        "class {c} source band ({}, {}) must satisfy 0 < low < high < {nyquist}",
                        s.band_low, s.band_high
                    ));
                }
                if !(s.variance >= 0.0 && s.variance.is_finite()) {
                    return bad(format!("class {c} source variance must be ≥ 0"));
                }
            }
        }
        if let Some(vectors) = &self.mixing_vectors {
            let shape_ok = vectors.len() == self.n_classes
                && vectors.iter().zip(&self.class_sources).all(|(v, s)| {
                    v.len() == s.len()
                        && v.iter().all(|a| {
                            a.len() == self.n_channels && a.iter().map(|x| x * x).sum::<f64>() > 0.0
                        })
                });
            if !shape_ok {
                return bad("mixing_vectors must be [class][source][channel], non-zero".into());
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return bad("class_names length differs from n_classes".into());
            }
        }
        Ok(())
    }

    fn class_names(&self) -> Vec<String> {
        if let Some(names) = &self.class_names {
            return names.clone();
        }
        if self.n_classes == 4 {
            return ["rest", "thumb", "index", "middle"].map(String::from).to_vec();
        }
        (0..self.n_classes).map(|c| format!("class{c}")).collect()
    }
}

/// Taps for a synthetic source: long enough that the zero-phase response
/// keeps ≥ 90% of the power inside the band.
pub fn source_taps(band: (f64, f64), sample_rate: f64) -> usize {
    let taps = (2.0 * sample_rate / (band.1 - band.0)).ceil() as usize;
    (taps | 1).max(dsp::MIN_TAPS)
}

/// Unit-norm mixing vector of one (class, source).
pub fn mixing_vector(cfg: &SynthConfig, class: usize, source: usize) -> Vec<f64> {
    let raw: Vec<f64> = match &cfg.mixing_vectors {
        Some(v) => v[class][source].clone(),
        None => {
            let class_key = if cfg.shared_mixing { 0 } else { class as u64 + 1 };
            let mut r = rng::stream(cfg.mixing_seed, &[class_key, source as u64]);
            (0..cfg.n_channels).map(|_| r.sample(StandardNormal)).collect()
        }
    };
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.into_iter().map(|x| x / norm).collect()
}

/// One realization of a band-limited source with the given variance.
pub struct SourceGenerator {
    plan: ZeroPhasePlan,
    scale: f64,
}

impl SourceGenerator {
    pub fn new(spec: &SourceSpec, sample_rate: f64, len: usize) -> Result<Self> {
        let band = (spec.band_low, spec.band_high);
        let taps = source_taps(band, sample_rate);
        let filter = dsp::design_bandpass(band.0, band.1, sample_rate, taps)?;
        let padded = (len + 2 * (taps - 1)).max(3 * taps + 1);
        let plan = ZeroPhasePlan::new(&filter, padded)?;
        // Forward-backward filtering of unit white noise yields variance
        // Σ r², r the autocorrelation of the taps.
        let h = &filter.coefficients;
        let r2: f64 = (0..taps)
            .map(|lag| h[lag..].iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
            .enumerate()
            .map(|(lag, r)| if lag == 0 { r * r } else { 2.0 * r * r })
            .sum();
        Ok(SourceGenerator {
            plan,
            scale: (spec.variance / r2).sqrt(),
        })
    }

    pub fn draw(&self, len: usize, rng: &mut impl Rng) -> Vec<f64> {
        let white: Vec<f64> = (0..self.plan.input_len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; self.plan.output_len()];
        self.plan.apply(&white, &mut out);
        out.truncate(len);
        out.iter_mut().for_each(|v| *v *= self.scale);
        out
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let len = cfg.n_samples();
    let generators: Vec<Vec<SourceGenerator>> = cfg
        .class_sources
        .iter()
        .map(|sources| {
            sources
                .iter()
                .map(|s| SourceGenerator::new(s, cfg.sample_rate, len))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mixing: Vec<Vec<Vec<f64>>> = (0..cfg.n_classes)
        .map(|c| (0..cfg.class_sources[c].len()).map(|s| mixing_vector(cfg, c, s)).collect())
        .collect();
    let noise_sd = cfg.noise_variance.sqrt();

    let n_trials = cfg.n_classes * cfg.trials_per_class;
    let trials = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let class = t / cfg.trials_per_class;
            let mut r = rng::stream(cfg.noise_seed, &[t as u64]);
            let mut x = Array2::<f64>::zeros((cfg.n_channels, len));
            for (gen, a) in generators[class].iter().zip(&mixing[class]) {
                let source = gen.draw(len, &mut r);
                for (ch, &weight) in a.iter().enumerate() {
                    for (v, &s) in x.row_mut(ch).iter_mut().zip(&source) {
                        *v += weight * s;
                    }
                }
            }
            if noise_sd > 0.0 {
                x.iter_mut().for_each(|v| *v += noise_sd * r.sample::<f64, _>(StandardNormal));
            }
            x.mapv_inplace(|v| v as f32 as f64);
            Trial::new(class, x, cfg.sample_rate)
        })
        .collect();

    Dataset::new(
        cfg.sample_rate,
        (0..cfg.n_channels).map(|c| format!("ch{c}")).collect(),
        cfg.class_names(),
        trials,
    )
}
