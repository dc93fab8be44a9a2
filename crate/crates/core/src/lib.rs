//! Decoding of individual finger movements (thumb, index, middle, rest) from
//! multichannel EEG epochs.
//!
//! The pipeline runs in stages:
//!
//! ```text
//! Dataset ──► dsp::decompose (2 Hz FIR filter bank, zero phase)
//!         ──► csp (per band, per binary problem: spatial filters + log-variance)
//!         ──► bandselect (LDA cross-validated frequency score, max(f) − sd(f) threshold)
//!         ──► extratrees (binary Extra-Trees on concatenated band features)
//!         ──► ecoc (exhaustive code, one binary pipeline per column, Hamming decoding)
//!         ──► eval (repeated stratified holdout, accuracy / Cohen's kappa)
//! ```
//!
//! [`synthgen`] produces datasets with planted band-limited spatial sources so
//! that every stage can be checked without recorded EEG.

pub mod bandselect;
pub mod config;
pub mod csp;
pub mod dsp;
pub mod ecoc;
pub mod error;
pub mod eval;
pub mod extratrees;
pub mod rng;
pub mod synthgen;
pub mod trialstore;

pub use error::{Error, Result};
pub use trialstore::{Dataset, SplitIndices, Trial};
