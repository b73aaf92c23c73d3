//! Multi-channel recordings, windowing, normalization and the full
//! preprocessing pipeline.

use super::filter::{bandpass, notch};
use super::montage::{bipolar_layout, MontageLayout, BIPOLAR_PAIRS};
use super::resample::resample;
use crate::error::{config, contract, LunaError, Result};
use std::sync::Arc;

/// Smallest standard deviation used when standardizing a channel.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// `C×T` samples stored channel-major. Used both for continuous recordings
/// and for fixed-length training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct EegSegment {
    data: Vec<f64>,
    channels: usize,
    samples: usize,
    pub rate: f64,
    pub montage: Arc<MontageLayout>,
    pub label: Option<u32>,
    pub preprocessed: bool,
}

impl EegSegment {
    pub fn new(data: Vec<f64>, channels: usize, rate: f64, montage: Arc<MontageLayout>) -> Result<Self> {
        if channels != montage.len() {
            return contract(format!(
                "{channels} channels of data but montage '{}' has {}",
                montage.id,
                montage.len()
            ));
        }
        if channels == 0 || !data.len().is_multiple_of(channels) {
            return contract(format!("{} samples do not split into {channels} channels", data.len()));
        }
        if rate.is_nan() || rate <= 0.0 {
            return config(format!("sampling rate must be positive, got {rate}"));
        }
        let samples = data.len() / channels;
        Ok(Self {
            data,
            channels,
            samples,
            rate,
            montage,
            label: None,
            preprocessed: false,
        })
    }

    pub fn from_channels(rows: Vec<Vec<f64>>, rate: f64, montage: Arc<MontageLayout>) -> Result<Self> {
        let c = rows.len();
        let t = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != t) {
            return contract("channels differ in length");
        }
        Self::new(rows.concat(), c, rate, montage)
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn duration(&self) -> f64 {
        self.samples as f64 / self.rate
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// Apply `f` to every channel, allowing the length to change.
    pub fn map_channels<F>(&self, rate: f64, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let rows = (0..self.channels)
            .map(|c| f(self.channel(c)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::from_channels(rows, rate, self.montage.clone())?;
        out.label = self.label;
        out.preprocessed = self.preprocessed;
        Ok(out)
    }

    /// Same samples with channels reordered: output channel `i` is input `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let montage = Arc::new(self.montage.permuted(perm)?);
        let rows = perm.iter().map(|&i| self.channel(i).to_vec()).collect();
        let mut out = Self::from_channels(rows, self.rate, montage)?;
        out.label = self.label;
        out.preprocessed = self.preprocessed;
        Ok(out)
    }
}

/// Cut non-overlapping windows of `window_seconds`; a trailing remainder is
/// dropped, and a recording shorter than one window yields nothing.
pub fn segment(recording: &EegSegment, window_seconds: f64) -> Result<Vec<EegSegment>> {
    let exact = recording.rate * window_seconds;
    let len = exact.round();
    if len < 1.0 || (exact - len).abs() > 1e-9 {
        return config(format!(
            "a {window_seconds} s window at {} Hz is not a whole number of samples",
            recording.rate
        ));
    }
    let len = len as usize;
    let count = recording.samples / len;
    (0..count)
        .map(|k| {
            let rows = (0..recording.channels)
                .map(|c| recording.channel(c)[k * len..(k + 1) * len].to_vec())
                .collect();
            let mut s = EegSegment::from_channels(rows, recording.rate, recording.montage.clone())?;
            s.label = recording.label;
            s.preprocessed = recording.preprocessed;
            Ok(s)
        })
        .collect()
}

/// Standardize one series in place (population moments). Constant series
/// become zeros.
pub fn zscore_in_place(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(SIGMA_FLOOR);
    for v in x.iter_mut() {
        *v = (*v - mean) / sd;
    }
}

/// Per-channel z-score normalization.
pub fn zscore(segment: &EegSegment) -> EegSegment {
    let mut out = segment.clone();
    for c in 0..out.channels {
        zscore_in_place(out.channel_mut(c));
    }
    out.preprocessed = true;
    out
}

/// Difference the longitudinal electrode pairs into the 20-channel bipolar
/// montage (first minus second electrode).
pub fn build_bipolar(unipolar: &EegSegment) -> Result<EegSegment> {
    let layout = bipolar_layout(&unipolar.montage)?;
    let m = &unipolar.montage;
    let rows = BIPOLAR_PAIRS
        .iter()
        .map(|(a, b)| {
            let ia = m.find(a).ok_or_else(|| LunaError::MissingElectrode(a.to_string()))?;
            let ib = m.find(b).ok_or_else(|| LunaError::MissingElectrode(b.to_string()))?;
            Ok(unipolar
                .channel(ia)
                .iter()
                .zip(unipolar.channel(ib))
                .map(|(x, y)| x - y)
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut out = EegSegment::from_channels(rows, unipolar.rate, Arc::new(layout))?;
    out.label = unipolar.label;
    out.preprocessed = unipolar.preprocessed;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub band: (f64, f64),
    /// Power-line frequency to notch out, if any.
    pub notch: Option<f64>,
    pub target_rate: f64,
    pub window_seconds: f64,
    pub bipolar: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band: (0.1, 75.0),
            notch: Some(60.0),
            target_rate: 256.0,
            window_seconds: 5.0,
            bipolar: false,
        }
    }
}

/// Band-pass, notch, resample, optional bipolar derivation, windowing and
/// per-window z-scoring, in that order.
pub fn preprocess(recording: &EegSegment, cfg: &PreprocessConfig) -> Result<Vec<EegSegment>> {
    let (lo, hi) = cfg.band;
    let rate = recording.rate;
    let mut x = recording.map_channels(rate, |ch| {
        let y = bandpass(ch, rate, lo, hi)?;
        match cfg.notch {
            Some(f) => notch(&y, rate, f),
            None => Ok(y),
        }
    })?;
    x = x.map_channels(cfg.target_rate, |ch| resample(ch, rate, cfg.target_rate))?;
    if cfg.bipolar {
        x = build_bipolar(&x)?;
    }
    Ok(segment(&x, cfg.window_seconds)?.iter().map(zscore).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rows: Vec<Vec<f64>>, rate: f64, labels: &[&str]) -> EegSegment {
        let m = Arc::new(MontageLayout::from_labels("t", labels).unwrap());
        EegSegment::from_channels(rows, rate, m).unwrap()
    }

    #[test]
    fn segment_counts() {
        let r = rec(vec![vec![0.0; 12 * 256]], 256.0, &["Cz"]);
        let s = segment(&r, 5.0).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|w| w.samples() == 1280));
        let r = rec(vec![vec![0.0; 5 * 256]], 256.0, &["Cz"]);
        assert_eq!(segment(&r, 5.0).unwrap().len(), 1);
        let r = rec(vec![vec![0.0; (4.9_f64 * 256.0) as usize]], 256.0, &["Cz"]);
        assert!(segment(&r, 5.0).unwrap().is_empty());
    }

    #[test]
    fn fractional_window_rejected() {
        let r = rec(vec![vec![0.0; 100]], 255.5, &["Cz"]);
        assert!(segment(&r, 1.0).is_err());
    }

    #[test]
    fn constant_channel_zscores_to_zero() {
        let r = rec(vec![vec![7.0; 64]], 256.0, &["Cz"]);
        assert!(zscore(&r).channel(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn channel_count_must_match_montage() {
        let m = Arc::new(MontageLayout::from_labels("t", &["Cz"]).unwrap());
        assert!(EegSegment::new(vec![0.0; 10], 2, 256.0, m).is_err());
    }

    #[test]
    fn bipolar_unit_impulse() {
        let labels = super::super::montage::STANDARD_1020;
        let rows = labels
            .iter()
            .map(|l| vec![if *l == "Fp1" { 1.0 } else { 0.0 }; 16])
            .collect();
        let b = build_bipolar(&rec(rows, 256.0, &labels)).unwrap();
        assert_eq!(b.channels(), 20);
        assert!(b.channel(0).iter().all(|v| *v == 1.0));
        assert!(b.channel(1).iter().all(|v| *v == 0.0));
        assert!(b.channel(10).iter().all(|v| *v == 1.0));
    }
}
