//! Signal conditioning: resampling, band-pass denoising, normalization,
//! segmentation into overlapping windows, and PPG/ECG pairing.

mod filter;
pub mod io;
mod record;

use std::collections::HashMap;

pub use filter::{Biquad, SosFilter};
pub use record::{
    Channel, RawRecord, SignalWindow, WindowSource, RANGE_TOL, TARGET_HZ, WINDOW_LEN, WINDOW_STRIDE,
};

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Pass bands of the denoising filter, per channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Passbands {
    pub ppg: (f64, f64),
    pub ecg: (f64, f64),
}

impl Default for Passbands {
    fn default() -> Self {
        Self {
            ppg: (0.5, 8.0),
            ecg: (0.5, 40.0),
        }
    }
}

/// Linear interpolation onto a uniform grid at `target_hz`, holding the last sample.
pub fn resample<T: Scalar>(rec: &RawRecord<T>, target_hz: f64) -> Result<RawRecord<T>> {
    rec.validate()?;
    if !(target_hz > 0.0) {
        return Err(Error::Parameter(format!("target rate must be positive, got {target_hz}")));
    }
    if rec.sample_rate_hz == target_hz {
        return Ok(rec.clone());
    }
    let out_len = (rec.duration_s() * target_hz).round() as usize;
    let ratio = rec.sample_rate_hz / target_hz;
    let n = rec.samples.len();
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j + 1 >= n {
                return rec.samples[n - 1];
            }
            let frac = T::lit(pos - j as f64);
            let (a, b) = (rec.samples[j], rec.samples[j + 1]);
            a + (b - a) * frac
        })
        .collect();
    Ok(rec.with_samples(out, target_hz))
}

/// Zero-phase band-pass with the channel's pass band. The record must already be at 128 Hz.
pub fn denoise<T: Scalar>(rec: &RawRecord<T>, bands: &Passbands) -> Result<RawRecord<T>> {
    if rec.sample_rate_hz != TARGET_HZ {
        return Err(Error::State(format!(
            "denoise expects a {TARGET_HZ} Hz record, got {} Hz; resample first",
            rec.sample_rate_hz
        )));
    }
    let (lo, hi) = match rec.channel {
        Channel::Ppg => bands.ppg,
        Channel::Ecg => bands.ecg,
    };
    if !(0.0 < lo && lo < hi && hi < TARGET_HZ / 2.0) {
        return Err(Error::Parameter(format!("invalid pass band {lo}..{hi} Hz")));
    }
    let xs: Vec<f64> = rec.samples.iter().map(|v| v.as_f64()).collect();
    let ys = SosFilter::bandpass(lo, hi, TARGET_HZ).filtfilt(&xs);
    Ok(rec.with_samples(ys.into_iter().map(T::lit).collect(), rec.sample_rate_hz))
}

/// Min-max map onto `[-1, 1]`; a constant input maps to zeros.
pub fn normalize<T: Scalar>(values: &[T]) -> Vec<T> {
    let (min, max) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    if !(span > T::zero()) {
        return vec![T::zero(); values.len()];
    }
    let two = T::lit(2.0);
    values
        .iter()
        .map(|&v| (two * (v - min) / span - T::one()).max(-T::one()).min(T::one()))
        .collect()
}

/// Window start offsets for a signal of `len` samples.
pub fn window_starts(len: usize) -> Vec<usize> {
    if len < WINDOW_LEN {
        return Vec::new();
    }
    (0..=(len - WINDOW_LEN)).step_by(WINDOW_STRIDE).collect()
}

/// Cuts a 128 Hz record into 512-sample windows every 256 samples, each re-normalized.
pub fn segment<T: Scalar>(rec: &RawRecord<T>) -> Result<Vec<SignalWindow<T>>> {
    let starts = window_starts(rec.samples.len());
    if starts.is_empty() {
        log::warn!(
            "record `{}` ({}) has {} samples, shorter than one {WINDOW_LEN}-sample window",
            rec.subject_id,
            rec.channel,
            rec.samples.len()
        );
    }
    starts
        .into_iter()
        .map(|s| {
            SignalWindow::new(
                normalize(&rec.samples[s..s + WINDOW_LEN]),
                rec.channel,
                WindowSource {
                    subject_id: rec.subject_id.clone(),
                    start: s,
                },
                rec.label.clone(),
            )
        })
        .collect()
}

/// Full conditioning chain: resample, denoise, normalize, segment.
pub fn preprocess<T: Scalar>(rec: &RawRecord<T>, bands: &Passbands) -> Result<Vec<SignalWindow<T>>> {
    let rec = resample(rec, TARGET_HZ)?;
    let rec = denoise(&rec, bands)?;
    let rec = rec.with_samples(normalize(&rec.samples), rec.sample_rate_hz);
    segment(&rec)
}

/// Pairs of windows sharing `(subject, start)`, plus the number of unmatched windows discarded.
pub type AlignedPairs<T> = (Vec<(SignalWindow<T>, SignalWindow<T>)>, usize);

pub fn align_pairs<T: Scalar>(ppg: Vec<SignalWindow<T>>, ecg: Vec<SignalWindow<T>>) -> AlignedPairs<T> {
    let total = ppg.len() + ecg.len();
    let mut by_source: HashMap<WindowSource, SignalWindow<T>> =
        ecg.into_iter().map(|w| (w.source.clone(), w)).collect();
    let pairs: Vec<_> = ppg
        .into_iter()
        .filter_map(|p| by_source.remove(&p.source).map(|e| (p, e)))
        .collect();
    let discarded = total - 2 * pairs.len();
    if discarded > 0 {
        log::info!("align_pairs: {} pairs, {discarded} unmatched windows discarded", pairs.len());
    }
    (pairs, discarded)
}
