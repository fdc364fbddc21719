//! Signal preprocessing: common-average reference, high-gamma analytic
//! amplitude, and epoch extraction with baseline normalization.
//!
//! Pipeline order is CAR -> (optional envelope) -> epoch/normalize. With
//! [`SignalKind::Raw`] the envelope stage is skipped and the CAR-referenced
//! voltage is epoched directly.

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch window: 250 ms before to 500 ms after articulation onset.
pub const EPOCH_SECONDS: f64 = 0.75;
/// Pre-onset baseline window length.
pub const BASELINE_SECONDS: f64 = 0.25;
/// High-gamma band edges in Hz.
pub const HIGH_GAMMA_BAND: (f64, f64) = (70.0, 150.0);

const BASELINE_EPS: f64 = 1e-8;

/// Which signal representation feeds feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Raw,
    HighGamma,
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SignalKind::Raw => write!(f, "raw"),
            SignalKind::HighGamma => write!(f, "high_gamma"),
        }
    }
}

/// Number of samples in one trial epoch.
pub fn epoch_len(sample_rate: f64) -> usize {
    (EPOCH_SECONDS * sample_rate).round() as usize
}

/// Number of pre-onset baseline samples.
pub fn baseline_len(sample_rate: f64) -> usize {
    (BASELINE_SECONDS * sample_rate).ceil() as usize
}

/// One preprocessed electrode-trial window of exactly `epoch_len` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialEpoch {
    pub electrode: u32,
    pub trial_id: u32,
    pub samples: Vec<f64>,
}

/// Trial onset used for epoch extraction.
#[derive(Debug, Clone, Copy)]
pub struct TrialOnset {
    pub trial_id: u32,
    pub onset_sample: usize,
}

/// Re-reference every channel by subtracting the per-sample mean across
/// electrodes. Each column of the output sums to zero.
pub fn common_average_reference(samples: ArrayView2<f64>) -> Result<Array2<f64>> {
    let l = samples.nrows();
    if l < 2 {
        return Err(Error::InvalidInput(format!(
            "common average reference needs at least 2 electrodes, got {l}"
        )));
    }
    let mean = samples.mean_axis(Axis(0)).expect("nonempty rows");
    Ok(&samples - &mean)
}

/// High-gamma analytic amplitude of every channel.
///
/// A frequency-domain brick-wall keeps only positive-frequency bins inside
/// 70..=150 Hz (doubled, negative mirror zeroed), which yields the analytic
/// signal of the bandpassed channel in a single pass; the envelope is its
/// magnitude. Computed on the continuous recording so epoch boundaries carry
/// no transform edge artifacts.
pub fn high_gamma_envelope(samples: ArrayView2<f64>, sample_rate: f64) -> Result<Array2<f64>> {
    if sample_rate <= 300.0 {
        return Err(Error::InvalidInput(format!(
            "sample rate {sample_rate} Hz too low for the 70-150 Hz band (need > 300 Hz)"
        )));
    }
    let t = samples.ncols();
    if t == 0 {
        return Err(Error::InvalidInput("empty recording".into()));
    }

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(t);
    let ifft = planner.plan_fft_inverse(t);
    let df = sample_rate / t as f64;

    let mut out = Array2::zeros(samples.raw_dim());
    let mut buf: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); t];
    for (ch, mut row_out) in samples.outer_iter().zip(out.outer_iter_mut()) {
        for (b, &x) in buf.iter_mut().zip(ch.iter()) {
            *b = Complex64::new(x, 0.0);
        }
        fft.process(&mut buf);
        // One-sided band mask: bin k holds frequency k*df for k <= T/2.
        for (k, b) in buf.iter_mut().enumerate() {
            let f = k as f64 * df;
            let in_band =
                k > 0 && k <= t / 2 && f >= HIGH_GAMMA_BAND.0 && f <= HIGH_GAMMA_BAND.1;
            if in_band {
                *b *= 2.0;
            } else {
                *b = Complex64::new(0.0, 0.0);
            }
        }
        ifft.process(&mut buf);
        let scale = 1.0 / t as f64;
        for (o, b) in row_out.iter_mut().zip(buf.iter()) {
            *o = b.norm() * scale;
        }
    }
    Ok(out)
}

/// Cut fixed-length epochs around each onset and normalize against the
/// pre-onset baseline: `x' = (x - mu_base) / (|mu_base| + 1e-8)`.
pub fn epoch_and_normalize(
    electrode: u32,
    channel: &[f64],
    onsets: &[TrialOnset],
    sample_rate: f64,
) -> Result<Vec<TrialEpoch>> {
    let m = epoch_len(sample_rate);
    let pre = baseline_len(sample_rate);
    let t = channel.len();

    let mut epochs = Vec::with_capacity(onsets.len());
    for onset in onsets {
        let start = onset.onset_sample.checked_sub(pre).ok_or_else(|| {
            Error::InvalidInput(format!(
                "trial {}: epoch window starts before the recording (onset {}, need {} pre-onset samples)",
                onset.trial_id, onset.onset_sample, pre
            ))
        })?;
        let end = start + m;
        if end > t {
            return Err(Error::InvalidInput(format!(
                "trial {}: epoch window [{start}, {end}) exceeds recording length {t}",
                onset.trial_id
            )));
        }
        let baseline = &channel[start..onset.onset_sample];
        let mu = crate::stats::mean(baseline);
        let denom = mu.abs() + BASELINE_EPS;
        let samples = channel[start..end].iter().map(|&x| (x - mu) / denom).collect();
        epochs.push(TrialEpoch {
            electrode,
            trial_id: onset.trial_id,
            samples,
        });
    }
    Ok(epochs)
}
