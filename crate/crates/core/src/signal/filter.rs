//! IIR filtering with second-order sections, applied forward and backward.

use crate::error::{config, Result};
use std::f64::consts::PI;

/// Butterworth order used for both band edges.
pub const BUTTERWORTH_ORDER: usize = 4;
/// Quality factor of the line-noise notch.
pub const NOTCH_Q: f64 = 30.0;

/// One biquad, `a0` normalized to 1: `[b0, b1, b2, a1, a2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    fn lowpass(f0: f64, rate: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / rate;
        let (c, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
        Self::normalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    fn highpass(f0: f64, rate: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / rate;
        let (c, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
        Self::normalized(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude response at `freq`.
    pub fn gain_at(&self, freq: f64, rate: f64) -> f64 {
        let w = 2.0 * PI * freq / rate;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let num = (
            self.b[0] + self.b[1] * c1 + self.b[2] * c2,
            -(self.b[1] * s1 + self.b[2] * s2),
        );
        let den = (
            1.0 + self.a[0] * c1 + self.a[1] * c2,
            -(self.a[0] * s1 + self.a[1] * s2),
        );
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Q factors of the biquads realizing an even-order Butterworth response.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / (2 * order) as f64).cos()))
        .collect()
}

/// Cascade of a 4th-order Butterworth high-pass at `lo` and low-pass at `hi`.
pub fn butter_bandpass(lo: f64, hi: f64, rate: f64) -> Result<Vec<Biquad>> {
    if rate <= 2.0 * hi {
        return config(format!(
            "sampling rate {rate} Hz must exceed twice the upper edge {hi} Hz"
        ));
    }
    if !(lo > 0.0 && lo < hi) {
        return config(format!("band edges must satisfy 0 < lo < hi, got {lo}..{hi}"));
    }
    let qs = butterworth_qs(BUTTERWORTH_ORDER);
    let mut sos: Vec<Biquad> = qs.iter().map(|&q| Biquad::highpass(lo, rate, q)).collect();
    sos.extend(qs.iter().map(|&q| Biquad::lowpass(hi, rate, q)));
    Ok(sos)
}

/// Second-order IIR notch at `freq` with bandwidth `freq / NOTCH_Q`.
pub fn iir_notch(freq: f64, rate: f64) -> Result<Biquad> {
    if rate <= 2.0 * freq {
        return config(format!(
            "notch at {freq} Hz needs a sampling rate above {} Hz",
            2.0 * freq
        ));
    }
    let w0 = 2.0 * PI * freq / rate;
    let bw = w0 / NOTCH_Q;
    let gain = 1.0 / (1.0 + (bw / 2.0).tan());
    Ok(Biquad {
        b: [gain, -2.0 * gain * w0.cos(), gain],
        a: [-2.0 * gain * w0.cos(), 2.0 * gain - 1.0],
    })
}

/// Steady-state section states for a unit step input.
fn sos_zi(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let y = s.dc_gain();
            let z1 = s.b[1] + s.b[2] - (s.a[0] + s.a[1]) * y;
            let z2 = s.b[2] - s.a[1] * y;
            let zi = [z1 * scale, z2 * scale];
            scale *= y;
            zi
        })
        .collect()
}

/// Causal filtering in transposed direct form II with the given initial states.
fn sosfilt(sos: &[Biquad], x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (s, z0) in sos.iter().zip(zi) {
        let (mut z1, mut z2) = (z0[0] * x0, z0[1] * x0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[0] * y + z2;
            z2 = s.b[2] * xin - s.a[1] * y;
            *v = y;
        }
    }
}

/// Forward–backward filtering with odd-extension padding and steady-state
/// initial conditions, giving zero phase and squared magnitude response.
pub fn sosfiltfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 || sos.is_empty() {
        return x.to_vec();
    }
    let padlen = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=padlen {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let zi = sos_zi(sos);
    let first = ext[0];
    sosfilt(sos, &mut ext, &zi, first);
    ext.reverse();
    let first = ext[0];
    sosfilt(sos, &mut ext, &zi, first);
    ext.reverse();
    ext[padlen..padlen + n].to_vec()
}

/// Zero-phase band-pass between `lo` and `hi` Hz.
pub fn bandpass(signal: &[f64], rate: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let sos = butter_bandpass(lo, hi, rate)?;
    Ok(sosfiltfilt(&sos, signal))
}

/// Zero-phase power-line notch; only 50 and 60 Hz are accepted.
pub fn notch(signal: &[f64], rate: f64, freq: f64) -> Result<Vec<f64>> {
    if freq != 50.0 && freq != 60.0 {
        return config(format!("notch frequency must be 50 or 60 Hz, got {freq}"));
    }
    let s = iir_notch(freq, rate)?;
    Ok(sosfiltfilt(&[s], signal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_in_zero_out() {
        let y = bandpass(&[0.0; 512], 256.0, 0.1, 75.0).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_low_rate_and_odd_notch() {
        assert!(bandpass(&[0.0; 8], 150.0, 0.1, 75.0).is_err());
        assert!(notch(&[0.0; 8], 256.0, 55.0).is_err());
    }

    #[test]
    fn butterworth_half_power_at_edge() {
        let sos = butter_bandpass(0.1, 75.0, 256.0).unwrap();
        let lp: f64 = sos[2..].iter().map(|s| s.gain_at(75.0, 256.0)).product();
        assert!((lp - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        let hp: f64 = sos[..2].iter().map(|s| s.gain_at(0.1, 256.0)).product();
        assert!((hp - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn notch_zero_at_center() {
        let s = iir_notch(50.0, 256.0).unwrap();
        assert!(s.gain_at(50.0, 256.0) < 1e-12);
        assert!((s.gain_at(10.0, 256.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn constant_passes_lowpass_states() {
        // A pure low-pass cascade must leave a constant untouched.
        let qs = butterworth_qs(4);
        let sos: Vec<Biquad> = qs.iter().map(|&q| Biquad::lowpass(30.0, 256.0, q)).collect();
        let y = sosfiltfilt(&sos, &[2.5; 300]);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-9));
    }
}
