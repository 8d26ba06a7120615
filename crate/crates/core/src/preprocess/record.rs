use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Samples per model window: 4 s at 128 Hz.
pub const WINDOW_LEN: usize = 512;
/// Hop between consecutive windows: 2 s at 128 Hz.
pub const WINDOW_STRIDE: usize = 256;
pub const TARGET_HZ: f64 = 128.0;

/// Tolerance on the `[-1, 1]` range of window samples.
pub const RANGE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Ppg,
    Ecg,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Ppg => "ppg",
            Channel::Ecg => "ecg",
        })
    }
}

/// One raw single-channel recording.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord<T = f32> {
    pub samples: Vec<T>,
    pub sample_rate_hz: f64,
    pub channel: Channel,
    pub subject_id: String,
    pub label: Option<String>,
}

impl<T: Scalar> RawRecord<T> {
    pub fn new(samples: Vec<T>, sample_rate_hz: f64, channel: Channel, subject_id: impl Into<String>) -> Result<Self> {
        let rec = Self {
            samples,
            sample_rate_hz,
            channel,
            subject_id: subject_id.into(),
            label: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Input(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.samples.len() < 2 {
            return Err(Error::Input(format!(
                "record `{}` needs at least 2 samples, has {}",
                self.subject_id,
                self.samples.len()
            )));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Same metadata, new samples.
    pub(crate) fn with_samples(&self, samples: Vec<T>, sample_rate_hz: f64) -> Self {
        Self {
            samples,
            sample_rate_hz,
            channel: self.channel,
            subject_id: self.subject_id.clone(),
            label: self.label.clone(),
        }
    }
}

/// Where a window came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowSource {
    pub subject_id: String,
    pub start: usize,
}

/// A normalized 512-sample segment of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalWindow<T = f32> {
    values: Vec<T>,
    pub channel: Channel,
    pub source: WindowSource,
    pub label: Option<String>,
}

impl<T: Scalar> SignalWindow<T> {
    pub fn new(values: Vec<T>, channel: Channel, source: WindowSource, label: Option<String>) -> Result<Self> {
        if values.len() != WINDOW_LEN {
            return Err(Error::Input(format!(
                "window must hold {WINDOW_LEN} samples, got {}",
                values.len()
            )));
        }
        let tol = T::lit(RANGE_TOL);
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < -T::one() - tol || **v > T::one() + tol)
        {
            return Err(Error::Input(format!("window sample {v} outside [-1, 1]")));
        }
        Ok(Self {
            values,
            channel,
            source,
            label,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn cast<U: Scalar>(&self) -> SignalWindow<U> {
        SignalWindow {
            values: self.values.iter().map(|&v| U::lit(v.as_f64())).collect(),
            channel: self.channel,
            source: self.source.clone(),
            label: self.label.clone(),
        }
    }
}
