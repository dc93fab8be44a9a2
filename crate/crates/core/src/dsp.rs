//! FIR bandpass design and filter-bank decomposition.
//!
//! Filters are Hamming-windowed sinc bandpasses, scaled to unit gain at the
//! band center. They are applied forward and backward (zero net phase), and
//! `taps − 1` samples are trimmed from each end of the result to drop the
//! warm-up transients.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trialstore::{Dataset, Trial};

pub const MIN_TAPS: usize = 31;

pub const DEFAULT_BAND_START: f64 = 5.0;
pub const DEFAULT_BAND_STOP: f64 = 40.0;
pub const DEFAULT_BAND_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub coefficients: Vec<f64>,
    pub band: (f64, f64),
    pub sample_rate: f64,
}

impl FirFilter {
    pub fn taps(&self) -> usize {
        self.coefficients.len()
    }

    /// |H(f)| of the single-pass filter.
    pub fn magnitude_response(&self, freq: f64) -> f64 {
        let omega = 2.0 * PI * freq / self.sample_rate;
        let (re, im) = self
            .coefficients
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (i, &h)| {
                let phase = omega * i as f64;
                (re + h * phase.cos(), im - h * phase.sin())
            });
        re.hypot(im)
    }
}

fn check_band(low: f64, high: f64, sample_rate: f64) -> Result<()> {
    let nyquist = sample_rate / 2.0;
    if !(low > 0.0 && low < high && high < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "band ({low}, {high}) Hz must satisfy 0 < low < high < {nyquist}"
        )));
    }
    Ok(())
}

pub fn design_bandpass(low: f64, high: f64, sample_rate: f64, taps: usize) -> Result<FirFilter> {
    check_band(low, high, sample_rate)?;
    if taps.is_multiple_of(2) || taps < MIN_TAPS {
        return Err(Error::InvalidParameter(format!(
            "tap count must be odd and at least {MIN_TAPS}, got {taps}"
        )));
    }
    let half = (taps - 1) / 2;
    let (fl, fh) = (low / sample_rate, high / sample_rate);
    let sinc = |x: f64| if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };

    let mut coefficients = vec![0.0; taps];
    for i in 0..=half {
        let n = i as f64 - half as f64;
        let ideal = 2.0 * fh * sinc(2.0 * fh * n) - 2.0 * fl * sinc(2.0 * fl * n);
        let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos();
        coefficients[i] = ideal * window;
        coefficients[taps - 1 - i] = ideal * window;
    }

    // Amplitude of a symmetric filter at the band center; the 2 Hz bands are
    // narrower than the window main lobe, so the raw peak gain is well below 1.
    let omega = PI * (low + high) / sample_rate;
    let center_gain: f64 = coefficients
        .iter()
        .enumerate()
        .map(|(i, &h)| h * (omega * (i as f64 - half as f64)).cos())
        .sum();
    for h in &mut coefficients {
        *h /= center_gain;
    }

    Ok(FirFilter {
        coefficients,
        band: (low, high),
        sample_rate,
    })
}

/// Zero-phase application of one filter to signals of a fixed length.
///
/// Forward-backward filtering with a symmetric kernel `h`, restricted to the
/// retained region, is a convolution with the autocorrelation of `h`. Its
/// spectrum is `|FFT(h)|²`, so each channel costs one forward and one inverse
/// FFT.
pub struct ZeroPhasePlan {
    taps: usize,
    len: usize,
    fft_len: usize,
    kernel_spectrum: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl ZeroPhasePlan {
    pub fn new(filter: &FirFilter, len: usize) -> Result<Self> {
        let taps = filter.taps();
        if len <= 3 * taps {
            return Err(Error::InsufficientData(format!(
                "signal of {len} samples is too short for a {taps}-tap filter (need more than {})",
                3 * taps
            )));
        }
        let fft_len = len.next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);

        let mut buf: Vec<Complex<f64>> = filter
            .coefficients
            .iter()
            .map(|&h| Complex::new(h, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(fft_len)
            .collect();
        forward.process(&mut buf);
        let scale = 1.0 / fft_len as f64;
        let kernel_spectrum = buf.iter().map(|c| c.norm_sqr() * scale).collect();

        Ok(ZeroPhasePlan {
            taps,
            len,
            fft_len,
            kernel_spectrum,
            forward,
            inverse,
        })
    }

    pub fn input_len(&self) -> usize {
        self.len
    }

    pub fn output_len(&self) -> usize {
        self.len - 2 * (self.taps - 1)
    }

    pub fn apply(&self, input: &[f64], output: &mut [f64]) {
        debug_assert_eq!(input.len(), self.len);
        debug_assert_eq!(output.len(), self.output_len());
        let mut buf: Vec<Complex<f64>> = input
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.fft_len)
            .collect();
        self.forward.process(&mut buf);
        for (c, &k) in buf.iter_mut().zip(&self.kernel_spectrum) {
            *c *= k;
        }
        self.inverse.process(&mut buf);
        let start = self.taps - 1;
        for (o, c) in output.iter_mut().zip(&buf[start..]) {
            *o = c.re;
        }
    }

    pub fn apply_trial(&self, trial: &Trial) -> Result<Trial> {
        if trial.n_samples() != self.len {
            return Err(Error::DimensionMismatch(format!(
                "filter plan built for {} samples, trial has {}",
                self.len,
                trial.n_samples()
            )));
        }
        let out_len = self.output_len();
        let mut out = Array2::zeros((trial.n_channels(), out_len));
        for (src, mut dst) in trial.samples.rows().into_iter().zip(out.rows_mut()) {
            let input: Vec<f64> = src.to_vec();
            let mut filtered = vec![0.0; out_len];
            self.apply(&input, &mut filtered);
            dst.assign(&ndarray::ArrayView1::from(&filtered));
        }
        Ok(Trial::new(trial.label, out, trial.sample_rate))
    }
}

pub fn apply_filter(trial: &Trial, filter: &FirFilter) -> Result<Trial> {
    check_rate(trial.sample_rate, filter.sample_rate)?;
    ZeroPhasePlan::new(filter, trial.n_samples())?.apply_trial(trial)
}

fn check_rate(trial_rate: f64, filter_rate: f64) -> Result<()> {
    if (trial_rate - filter_rate).abs() > 1e-9 * filter_rate.abs() {
        return Err(Error::InvalidParameter(format!(
            "trial sampled at {trial_rate} Hz, filter designed for {filter_rate} Hz"
        )));
    }
    Ok(())
}

/// Default tap count: about half a second of signal, forced odd.
pub fn default_taps(sample_rate: f64) -> usize {
    (((sample_rate / 2.0).round() as usize) | 1).max(MIN_TAPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub bands: Vec<(f64, f64)>,
    pub taps: usize,
}

impl FilterBank {
    /// Contiguous bands of `width` Hz from `start` while the upper edge stays
    /// at or below `stop`.
    pub fn from_grid(start: f64, stop: f64, width: f64, taps: usize) -> Result<Self> {
        if !(start > 0.0 && width > 0.0 && stop > start) {
            return Err(Error::InvalidParameter(format!(
                "band grid start={start} stop={stop} width={width} is invalid"
            )));
        }
        let n = ((stop - start) / width + 1e-9).floor() as usize;
        if n == 0 {
            return Err(Error::InvalidParameter(format!(
                "band grid start={start} stop={stop} width={width} holds no band"
            )));
        }
        let bands = (0..n)
            .map(|i| (start + i as f64 * width, start + (i + 1) as f64 * width))
            .collect();
        Ok(FilterBank { bands, taps })
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::InvalidParameter("filter bank has no bands".into()));
        }
        for &(low, high) in &self.bands {
            check_band(low, high, sample_rate)?;
        }
        Ok(())
    }

    pub fn filters(&self, sample_rate: f64) -> Result<Vec<FirFilter>> {
        self.validate(sample_rate)?;
        self.bands
            .iter()
            .map(|&(l, h)| design_bandpass(l, h, sample_rate, self.taps))
            .collect()
    }

    pub fn trimmed_len(&self, len: usize) -> usize {
        len.saturating_sub(2 * (self.taps.saturating_sub(1)))
    }
}

/// The 17-band, 2 Hz grid (5–7, 7–9, ..., 37–39 Hz).
pub fn default_bank(sample_rate: f64) -> FilterBank {
    FilterBank::from_grid(
        DEFAULT_BAND_START,
        DEFAULT_BAND_STOP,
        DEFAULT_BAND_WIDTH,
        default_taps(sample_rate),
    )
    .expect("default grid is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandDecomposition {
    pub bands: Vec<(f64, f64)>,
    pub taps: usize,
    /// One filtered dataset per band, trial order and labels unchanged.
    pub datasets: Vec<Dataset>,
}

impl BandDecomposition {
    pub fn labels(&self) -> Vec<usize> {
        self.datasets[0].labels()
    }

    pub fn n_trials(&self) -> usize {
        self.datasets[0].trials.len()
    }
}

/// Plans for every band of a bank, for trials of one length.
pub struct BankPlan {
    pub bands: Vec<(f64, f64)>,
    plans: Vec<ZeroPhasePlan>,
}

impl BankPlan {
    pub fn new(bank: &FilterBank, sample_rate: f64, len: usize) -> Result<Self> {
        let plans = bank
            .filters(sample_rate)?
            .iter()
            .map(|f| ZeroPhasePlan::new(f, len))
            .collect::<Result<Vec<_>>>()?;
        Ok(BankPlan {
            bands: bank.bands.clone(),
            plans,
        })
    }

    pub fn band(&self, index: usize) -> &ZeroPhasePlan {
        &self.plans[index]
    }

    pub fn n_bands(&self) -> usize {
        self.plans.len()
    }
}

fn uniform_length(dataset: &Dataset) -> Result<usize> {
    let len = dataset.trials[0].n_samples();
    if let Some(i) = dataset.trials.iter().position(|t| t.n_samples() != len) {
        return Err(Error::DimensionMismatch(format!(
            "trial {i} has {} samples, trial 0 has {len}",
            dataset.trials[i].n_samples()
        )));
    }
    Ok(len)
}

pub fn decompose(dataset: &Dataset, bank: &FilterBank) -> Result<BandDecomposition> {
    dataset.validate()?;
    let len = uniform_length(dataset)?;
    let plan = BankPlan::new(bank, dataset.sample_rate, len)?;
    let datasets = (0..plan.n_bands())
        .into_par_iter()
        .map(|b| {
            let trials = dataset
                .trials
                .iter()
                .map(|t| plan.band(b).apply_trial(t))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset {
                sample_rate: dataset.sample_rate,
                channel_names: dataset.channel_names.clone(),
                class_names: dataset.class_names.clone(),
                trials,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BandDecomposition {
        bands: bank.bands.clone(),
        taps: bank.taps,
        datasets,
    })
}

/// Filters one trial into every band of `bank`.
pub fn decompose_trial(trial: &Trial, bank: &FilterBank) -> Result<Vec<Trial>> {
    bank.filters(trial.sample_rate)?
        .iter()
        .map(|f| apply_filter(trial, f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    /// Textbook forward-backward filtering: causal FIR with zero initial
    /// state, reverse, filter again, reverse, then trim.
    fn filtfilt_direct(h: &[f64], x: &[f64]) -> Vec<f64> {
        let causal = |x: &[f64]| -> Vec<f64> {
            (0..x.len())
                .map(|n| {
                    h.iter()
                        .enumerate()
                        .filter(|(k, _)| *k <= n)
                        .map(|(k, &hk)| hk * x[n - k])
                        .sum()
                })
                .collect()
        };
        let mut y = causal(x);
        y.reverse();
        let mut z = causal(&y);
        z.reverse();
        let trim = h.len() - 1;
        z[trim..x.len() - trim].to_vec()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sinusoid_trial(freq: f64, fs: f64, len: usize) -> Trial {
        let row: Vec<f64> = (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / fs).sin())
            .collect();
        Trial::new(0, Array2::from_shape_vec((1, len), row).unwrap(), fs)
    }

    #[test]
    fn design_meets_gain_contract() {
        let f = design_bandpass(9.0, 11.0, 512.0, 257).unwrap();
        let g10 = f.magnitude_response(10.0);
        assert!((0.95..=1.05).contains(&g10), "gain at 10 Hz = {g10}");
        assert!(f.magnitude_response(0.0) <= 0.01);
        assert!(f.magnitude_response(30.0) <= 0.01);
    }

    #[test]
    fn design_is_exactly_symmetric() {
        let f = design_bandpass(9.0, 11.0, 512.0, 257).unwrap();
        let c = &f.coefficients;
        for i in 0..c.len() {
            assert_eq!(c[i], c[c.len() - 1 - i]);
        }
    }

    #[test]
    fn design_rejects_bad_arguments() {
        assert!(design_bandpass(11.0, 9.0, 512.0, 257).is_err());
        assert!(design_bandpass(10.0, 10.0, 512.0, 257).is_err());
        assert!(design_bandpass(9.0, 300.0, 512.0, 257).is_err());
        assert!(design_bandpass(0.0, 11.0, 512.0, 257).is_err());
        assert!(design_bandpass(9.0, 11.0, 512.0, 256).is_err());
        assert!(design_bandpass(9.0, 11.0, 512.0, 29).is_err());
    }

    #[test]
    fn fft_path_matches_direct_filtfilt() {
        let f = design_bandpass(9.0, 11.0, 128.0, 31).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let expected = filtfilt_direct(&f.coefficients, &x);
        let plan = ZeroPhasePlan::new(&f, x.len()).unwrap();
        let mut got = vec![0.0; plan.output_len()];
        plan.apply(&x, &mut got);
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn passband_sinusoid_survives() {
        let f = design_bandpass(9.0, 11.0, 512.0, 257).unwrap();
        let trial = sinusoid_trial(10.0, 512.0, 2048);
        let out = apply_filter(&trial, &f).unwrap();
        let out_rms = rms(out.samples.row(0).as_slice().unwrap());
        assert!(out_rms >= 0.9 * rms(trial.samples.row(0).as_slice().unwrap()));
    }

    #[test]
    fn stopband_sinusoid_is_removed() {
        let f = design_bandpass(9.0, 11.0, 512.0, 257).unwrap();
        let trial = sinusoid_trial(30.0, 512.0, 2048);
        let out = apply_filter(&trial, &f).unwrap();
        let out_rms = rms(out.samples.row(0).as_slice().unwrap());
        assert!(out_rms <= 0.02 * rms(trial.samples.row(0).as_slice().unwrap()));
    }

    #[test]
    fn zero_in_zero_out_and_label_kept() {
        let f = design_bandpass(9.0, 11.0, 512.0, 257).unwrap();
        let trial = Trial::new(3, Array2::zeros((2, 1000)), 512.0);
        let out = apply_filter(&trial, &f).unwrap();
        assert_eq!(out.label, 3);
        assert_eq!(out.n_samples(), 1000 - 512);
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_trial_is_rejected() {
        let f = design_bandpass(9.0, 11.0, 512.0, 257).unwrap();
        let trial = Trial::new(0, Array2::zeros((1, 3 * 257)), 512.0);
        assert!(matches!(
            apply_filter(&trial, &f),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let f = design_bandpass(9.0, 11.0, 512.0, 257).unwrap();
        let trial = Trial::new(0, Array2::zeros((1, 2000)), 500.0);
        assert!(apply_filter(&trial, &f).is_err());
    }

    #[test]
    fn default_bank_is_seventeen_two_hz_bands() {
        let bank = default_bank(512.0);
        assert_eq!(bank.bands.len(), 17);
        assert_eq!(bank.bands[0], (5.0, 7.0));
        assert_eq!(bank.bands[16], (37.0, 39.0));
        assert_eq!(bank.taps, 257);
        for w in bank.bands.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        for rate in [100.0, 256.0, 1000.0] {
            for &(l, h) in &default_bank(rate).bands {
                assert_eq!(h - l, 2.0);
            }
        }
    }

    #[test]
    fn even_grid_is_expressible() {
        let bank = FilterBank::from_grid(4.0, 40.0, 2.0, 257).unwrap();
        assert_eq!(bank.bands[0], (4.0, 6.0));
        assert_eq!(bank.bands.len(), 18);
    }

    fn white_noise_dataset(len: usize, n: usize) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let trials = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..2 * len).map(|_| StandardNormal.sample(&mut rng)).collect();
                Trial::new(i % 2, Array2::from_shape_vec((2, len), v).unwrap(), 512.0)
            })
            .collect();
        Dataset::new(
            512.0,
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            trials,
        )
        .unwrap()
    }

    #[test]
    fn decompose_preserves_structure() {
        let ds = white_noise_dataset(1536, 4);
        let bank = default_bank(512.0);
        let decomp = decompose(&ds, &bank).unwrap();
        assert_eq!(decomp.datasets.len(), 17);
        for band in &decomp.datasets {
            assert_eq!(band.trials.len(), 4);
            assert_eq!(band.labels(), ds.labels());
            for t in &band.trials {
                assert_eq!(t.n_channels(), 2);
                assert_eq!(t.n_samples(), 1536 - 2 * 256);
            }
        }
    }

    #[test]
    fn wide_band_passes_signal_through() {
        let fs = 512.0;
        let len = 2048;
        let row: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * 40.0 * t).sin() + 0.5 * (2.0 * PI * 95.0 * t + 0.3).cos()
            })
            .collect();
        let trial = Trial::new(0, Array2::from_shape_vec((1, len), row.clone()).unwrap(), fs);
        let ds = Dataset::new(fs, vec!["c".into()], vec!["a".into()], vec![trial]).unwrap();
        let bank = FilterBank {
            bands: vec![(20.0, 200.0)],
            taps: 257,
        };
        let out = decompose(&ds, &bank).unwrap();
        let filtered = &out.datasets[0].trials[0].samples;
        for (j, &v) in filtered.row(0).iter().enumerate() {
            assert!((v - row[j + 256]).abs() < 0.02, "sample {j}: {v}");
        }
    }

    #[test]
    fn white_noise_power_stays_near_band() {
        let fs = 512.0;
        let len = 512 * 32;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let f = design_bandpass(9.0, 11.0, fs, 257).unwrap();
        let plan = ZeroPhasePlan::new(&f, len).unwrap();
        let mut y = vec![0.0; plan.output_len()];
        plan.apply(&x, &mut y);

        let mut spec: Vec<Complex<f64>> = y.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(spec.len()).process(&mut spec);
        let n = spec.len();
        let (mut inside, mut total) = (0.0, 0.0);
        for (k, c) in spec.iter().enumerate().take(n / 2 + 1) {
            let freq = k as f64 * fs / n as f64;
            let p = c.norm_sqr();
            total += p;
            if (8.0..=12.0).contains(&freq) {
                inside += p;
            }
        }
        assert!(inside / total >= 0.85, "fraction {}", inside / total);
    }
}
