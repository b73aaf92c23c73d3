//! Rational polyphase resampling.

use crate::error::{config, Result};

/// Kaiser window shape parameter of the anti-aliasing filter.
const KAISER_BETA: f64 = 5.0;
/// Filter half-length in multiples of `max(up, down)`.
const HALF_LEN_FACTOR: usize = 10;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduced `(up, down)` for a rate change, rates resolved to 1 mHz.
pub fn rational_ratio(from_rate: f64, to_rate: f64) -> Result<(usize, usize)> {
    if !(from_rate > 0.0 && to_rate > 0.0) || !from_rate.is_finite() || !to_rate.is_finite() {
        return config(format!(
            "sampling rates must be positive, got {from_rate} and {to_rate}"
        ));
    }
    let f = (from_rate * 1000.0).round() as u64;
    let t = (to_rate * 1000.0).round() as u64;
    let g = gcd(f, t);
    Ok(((t / g) as usize, (f / g) as usize))
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass with each polyphase branch normalized to unit
/// DC gain, so constants pass unchanged at every output phase.
fn design(up: usize, down: usize) -> Vec<f64> {
    let maxr = up.max(down);
    let half = HALF_LEN_FACTOR * maxr;
    let len = 2 * half + 1;
    let cutoff = 1.0 / maxr as f64;
    let denom = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..len)
        .map(|j| {
            let t = j as f64 - half as f64;
            let arg = std::f64::consts::PI * cutoff * t;
            let sinc = if t == 0.0 { 1.0 } else { arg.sin() / arg };
            let r = t / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / denom;
            cutoff * sinc * w
        })
        .collect();
    for phase in 0..up {
        let s: f64 = h.iter().skip(phase).step_by(up).sum();
        if s.abs() > 0.0 {
            h.iter_mut().skip(phase).step_by(up).for_each(|v| *v /= s);
        }
    }
    h
}

/// Resample `signal` from `from_rate` to `to_rate`. The output has
/// `ceil(n·up/down)` samples; the edges are extended with the boundary values.
pub fn resample(signal: &[f64], from_rate: f64, to_rate: f64) -> Result<Vec<f64>> {
    let (up, down) = rational_ratio(from_rate, to_rate)?;
    if up == down || signal.is_empty() {
        return Ok(signal.to_vec());
    }
    let h = design(up, down);
    let delay = (h.len() - 1) / 2;
    let n = signal.len();
    let out_len = (n * up).div_ceil(down);
    let at = |i: isize| -> f64 {
        if i < 0 {
            signal[0]
        } else if i as usize >= n {
            signal[n - 1]
        } else {
            signal[i as usize]
        }
    };
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = m * down + delay;
        // taps j = t - i·up with 0 <= j < len
        let phase = t % up;
        let i_max = (t / up) as isize;
        let mut acc = 0.0;
        let mut j = phase;
        let mut i = i_max;
        while j < h.len() {
            acc += h[j] * at(i);
            j += up;
            i -= 1;
        }
        out.push(acc);
    }
    Ok(out)
}
