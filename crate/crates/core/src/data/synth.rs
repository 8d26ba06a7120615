//! Gaussian-sum ECG and delayed raised-cosine PPG with a shared beat grid.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::preprocess::{Biquad, Channel, RawRecord, SosFilter, TARGET_HZ};
use crate::rng::substream;

/// Time of the first R peak; at 60 bpm later peaks fall on samples `32 + 128k`.
pub const FIRST_R_S: f64 = 0.25;
const PPG_SMOOTH_HZ: f64 = 5.0;
pub const MIN_DURATION_S: f64 = 4.0;

/// One Gaussian ECG component, timed relative to the R peak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub width_s: f64,
    pub offset_s: f64,
}

const fn wave(amplitude: f64, width_s: f64, offset_s: f64) -> Wave {
    Wave {
        amplitude,
        width_s,
        offset_s,
    }
}

/// P, Q, R, S, T.
pub const DEFAULT_WAVES: [Wave; 5] = [
    wave(0.15, 0.025, -0.2),
    wave(-0.15, 0.01, -0.035),
    wave(1.0, 0.012, 0.0),
    wave(-0.25, 0.01, 0.035),
    wave(0.3, 0.04, 0.28),
];
pub const R_WAVE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub heart_rate_bpm: f64,
    pub waves: [Wave; 5],
    pub ppg_delay_s: f64,
    /// Systolic pulse duration as a fraction of the beat period.
    pub ppg_width: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub class_id: Option<usize>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            heart_rate_bpm: 75.0,
            waves: DEFAULT_WAVES,
            ppg_delay_s: 0.2,
            ppg_width: 0.6,
            noise_std: 0.05,
            seed: 0,
            class_id: None,
        }
    }
}

impl SynthParams {
    /// Defaults with a heart rate drawn uniformly from 60–100 bpm for this seed.
    pub fn sampled(seed: u64) -> Self {
        let mut rng = substream(seed, "synth/heart_rate");
        Self {
            heart_rate_bpm: rng.gen_range(60.0..100.0),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(30.0..=200.0).contains(&self.heart_rate_bpm) {
            return bad(format!("heart rate {} bpm outside [30, 200]", self.heart_rate_bpm));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.waves.iter().any(|w| !(w.width_s > 0.0)) {
            return bad("wave widths must be positive".into());
        }
        if !(self.ppg_delay_s >= 0.0) || !(self.ppg_width > 0.0 && self.ppg_width <= 1.0) {
            return bad(format!(
                "ppg delay {} s / width fraction {} out of range",
                self.ppg_delay_s, self.ppg_width
            ));
        }
        Ok(())
    }

    pub fn period_s(&self) -> f64 {
        60.0 / self.heart_rate_bpm
    }

    fn beat_times(&self, duration_s: f64) -> Vec<f64> {
        let period = self.period_s();
        let first = (FIRST_R_S / period).ceil() as i64 + 1;
        (-first..)
            .map(|k| FIRST_R_S + k as f64 * period)
            .take_while(|&t| t < duration_s + period)
            .collect()
    }

    /// Noiseless ECG samples at 128 Hz.
    pub fn clean_ecg(&self, n: usize) -> Vec<f64> {
        let beats = self.beat_times(n as f64 / TARGET_HZ);
        (0..n)
            .map(|i| {
                let t = i as f64 / TARGET_HZ;
                beats
                    .iter()
                    .flat_map(|&tb| self.waves.iter().map(move |w| (tb, w)))
                    .map(|(tb, w)| {
                        let z = (t - tb - w.offset_s) / w.width_s;
                        w.amplitude * (-0.5 * z * z).exp()
                    })
                    .sum()
            })
            .collect()
    }

    /// Noiseless PPG samples at 128 Hz: one raised-cosine pulse per beat, smoothed.
    pub fn clean_ppg(&self, n: usize) -> Vec<f64> {
        let beats = self.beat_times(n as f64 / TARGET_HZ);
        let width = self.ppg_width * self.period_s();
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / TARGET_HZ;
                beats
                    .iter()
                    .map(|&tb| t - tb - self.ppg_delay_s)
                    .filter(|&tau| (0.0..width).contains(&tau))
                    .map(|tau| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * tau / width).cos()))
                    .sum()
            })
            .collect();
        SosFilter {
            sections: vec![Biquad::lowpass(PPG_SMOOTH_HZ, TARGET_HZ)],
        }
        .filtfilt(&raw)
    }
}

fn add_noise(xs: &mut [f64], std: f64, seed: u64, purpose: &str) {
    if std == 0.0 {
        return;
    }
    let mut rng = substream(seed, purpose);
    let dist = Normal::new(0.0, std).expect("validated std");
    for x in xs {
        *x += dist.sample(&mut rng);
    }
}

/// Paired PPG and ECG records of `duration_s` seconds at 128 Hz.
pub fn synth_pair<T: Scalar>(params: &SynthParams, duration_s: f64, subject_id: &str) -> Result<(RawRecord<T>, RawRecord<T>)> {
    params.validate()?;
    if !(duration_s >= MIN_DURATION_S) {
        return Err(Error::Parameter(format!("duration {duration_s} s is below {MIN_DURATION_S} s")));
    }
    let n = (duration_s * TARGET_HZ).round() as usize;
    let mut ecg = params.clean_ecg(n);
    let mut ppg = params.clean_ppg(n);
    add_noise(&mut ecg, params.noise_std, params.seed, "synth/noise/ecg");
    add_noise(&mut ppg, params.noise_std, params.seed, "synth/noise/ppg");
    let cast = |xs: Vec<f64>| xs.into_iter().map(T::lit).collect();
    Ok((
        RawRecord::new(cast(ppg), TARGET_HZ, Channel::Ppg, subject_id)?,
        RawRecord::new(cast(ecg), TARGET_HZ, Channel::Ecg, subject_id)?,
    ))
}

/// Class `k` scales the R amplitude by `1 + 0.3k`, adds `10k` bpm and scales the PPG delay by `1 + 0.1k`.
pub fn make_classes(base: &SynthParams, n_classes: usize) -> Result<Vec<SynthParams>> {
    if n_classes != 2 && n_classes != 4 {
        return Err(Error::Parameter(format!("n_classes must be 2 or 4, got {n_classes}")));
    }
    (0..n_classes)
        .map(|k| {
            let kf = k as f64;
            let mut p = base.clone();
            p.waves[R_WAVE].amplitude *= 1.0 + 0.3 * kf;
            p.heart_rate_bpm += 10.0 * kf;
            p.ppg_delay_s *= 1.0 + 0.1 * kf;
            p.class_id = Some(k);
            p.validate()?;
            Ok(p)
        })
        .collect()
}
