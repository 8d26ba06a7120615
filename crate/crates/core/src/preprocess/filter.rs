//! Zero-phase Butterworth band-pass built from second-order sections.

use std::f64::consts::PI;

/// Normalized biquad (`a0 = 1`) in transposed direct form II.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Second-order Butterworth low-pass via the bilinear transform.
    pub fn lowpass(cutoff_hz: f64, fs: f64) -> Self {
        let k = (PI * cutoff_hz / fs).tan();
        let q = std::f64::consts::FRAC_1_SQRT_2;
        let norm = 1.0 / (1.0 + k / q + k * k);
        let b0 = k * k * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
        }
    }

    /// Second-order Butterworth high-pass via the bilinear transform.
    pub fn highpass(cutoff_hz: f64, fs: f64) -> Self {
        let k = (PI * cutoff_hz / fs).tan();
        let q = std::f64::consts::FRAC_1_SQRT_2;
        let norm = 1.0 / (1.0 + k / q + k * k);
        Self {
            b: [norm, -2.0 * norm, norm],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
        }
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// State that makes a constant input `x` produce its steady-state output immediately.
    fn steady_state(&self, x: f64) -> [f64; 2] {
        let y = self.dc_gain() * x;
        [y - self.b[0] * x, self.b[2] * x - self.a[1] * y]
    }

    fn run(&self, xs: &mut [f64]) {
        let Some(&x0) = xs.first() else { return };
        let [mut z1, mut z2] = self.steady_state(x0);
        for x in xs.iter_mut() {
            let y = self.b[0] * *x + z1;
            z1 = self.b[1] * *x - self.a[0] * y + z2;
            z2 = self.b[2] * *x - self.a[1] * y;
            *x = y;
        }
    }
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn bandpass(low_hz: f64, high_hz: f64, fs: f64) -> Self {
        Self {
            sections: vec![Biquad::highpass(low_hz, fs), Biquad::lowpass(high_hz, fs)],
        }
    }

    fn run(&self, xs: &mut [f64]) {
        for s in &self.sections {
            s.run(xs);
        }
    }

    /// Forward-backward filtering with odd-reflection padding at both ends.
    pub fn filtfilt(&self, xs: &[f64]) -> Vec<f64> {
        let n = xs.len();
        if n < 2 {
            return xs.to_vec();
        }
        let pad = (n - 1).min(128);
        let (first, last) = (xs[0], xs[n - 1]);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - xs[i]));
        ext.extend_from_slice(xs);
        ext.extend((1..=pad).map(|i| 2.0 * last - xs[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}
