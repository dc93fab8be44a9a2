use serde::{Deserialize, Serialize};

use crate::bandselect::ScoreConfig;
use crate::dsp::{self, FilterBank};
use crate::error::{Error, Result};
use crate::extratrees::EtGrid;

/// Every tunable knob of the decoding pipeline. Missing keys in a JSON
/// config take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub band_start: f64,
    pub band_stop: f64,
    pub band_width: f64,
    /// `None` derives the tap count from the sample rate (257 at 512 Hz).
    pub fir_taps: Option<usize>,
    pub csp_m: usize,
    pub lda_shrinkage: f64,
    pub cv_folds: usize,
    /// `None` means {1, ⌈√d⌉, d} for feature dimension d.
    pub et_k_grid: Option<Vec<usize>>,
    pub et_nmin_grid: Vec<usize>,
    pub et_m_grid: Vec<usize>,
    pub test_fraction: f64,
    pub repetitions: usize,
    /// Also evaluate rest-vs-finger and finger-pair binary decoders.
    pub binary_tables: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            band_start: dsp::DEFAULT_BAND_START,
            band_stop: dsp::DEFAULT_BAND_STOP,
            band_width: dsp::DEFAULT_BAND_WIDTH,
            fir_taps: None,
            csp_m: 2,
            lda_shrinkage: 1e-3,
            cv_folds: 5,
            et_k_grid: None,
            et_nmin_grid: vec![2, 5, 10],
            et_m_grid: vec![50, 100, 200],
            test_fraction: 0.2,
            repetitions: 10,
            binary_tables: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.csp_m == 0 {
            return bad("csp_m must be positive".into());
        }
        if self.cv_folds < 2 {
            return bad(format!("cv_folds must be at least 2, got {}", self.cv_folds));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(self.lda_shrinkage >= 0.0 && self.lda_shrinkage.is_finite()) {
            return bad(format!("lda_shrinkage must be ≥ 0, got {}", self.lda_shrinkage));
        }
        if matches!(&self.et_k_grid, Some(k) if k.is_empty() || k.contains(&0)) {
            return bad("et_k_grid must be non-empty with positive entries".into());
        }
        if self.et_nmin_grid.is_empty() || self.et_nmin_grid.iter().any(|&n| n < 2) {
            return bad("et_nmin_grid must be non-empty with entries ≥ 2".into());
        }
        if self.et_m_grid.is_empty() || self.et_m_grid.contains(&0) {
            return bad("et_m_grid must be non-empty with positive entries".into());
        }
        FilterBank::from_grid(self.band_start, self.band_stop, self.band_width, 31)?;
        Ok(())
    }

    pub fn bank(&self, sample_rate: f64) -> Result<FilterBank> {
        let taps = self.fir_taps.unwrap_or_else(|| dsp::default_taps(sample_rate));
        let bank = FilterBank::from_grid(self.band_start, self.band_stop, self.band_width, taps)?;
        bank.validate(sample_rate)?;
        Ok(bank)
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            m: self.csp_m,
            folds: self.cv_folds,
            shrinkage: self.lda_shrinkage,
        }
    }

    pub fn et_grid(&self, feature_dim: usize) -> EtGrid {
        let mut grid = EtGrid::default_for(feature_dim);
        if let Some(k) = &self.et_k_grid {
            grid.k = k.clone();
        }
        grid.n_min = self.et_nmin_grid.clone();
        grid.m = self.et_m_grid.clone();
        grid
    }
}
