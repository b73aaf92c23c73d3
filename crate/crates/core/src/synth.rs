//! Synthetic multi-channel EEG: band-limited latent sources on the scalp
//! sphere mixed into electrodes by distance, plus white noise.

use crate::error::{config, Result};
use crate::signal::segment::zscore_in_place;
use crate::signal::{EegSegment, MontageLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::f64::consts::PI;
use std::sync::Arc;

/// Oscillation bands in Hz: delta, alpha, beta.
pub const BANDS: [(f64, f64); 3] = [(1.0, 4.0), (8.0, 12.0), (13.0, 30.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rate: f64,
    pub seconds: f64,
    /// Latent sources per segment.
    pub sources: usize,
    /// Width of the Gaussian spatial mixing kernel (unit-sphere distance).
    pub spatial_sigma: f64,
    /// Base amplitude of each band.
    pub band_amplitude: [f64; 3],
    /// Standard deviation of additive noise relative to unit source amplitude.
    pub noise: f64,
    /// With `Some(k)` (k ≤ 3), segment `i` gets label `i mod k` and band
    /// `label` is amplified by `class_gain`.
    pub n_classes: Option<usize>,
    pub class_gain: f64,
    /// Standardize each channel of every segment.
    pub normalize: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rate: 256.0,
            seconds: 5.0,
            sources: 6,
            spatial_sigma: 1.0,
            band_amplitude: [1.0, 0.8, 0.4],
            noise: 0.1,
            n_classes: None,
            class_gain: 3.0,
            normalize: true,
        }
    }
}

/// A montage with its segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub montage: Arc<MontageLayout>,
    pub segments: Vec<EegSegment>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<u32>> {
        self.segments.iter().map(|s| s.label).collect()
    }

    /// One more than the largest label, or 0 when unlabeled.
    pub fn n_classes(&self) -> usize {
        self.segments
            .iter()
            .filter_map(|s| s.label)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    /// Deterministic split: every `k`-th segment (offset `k-1`) goes to the
    /// second part.
    pub fn split_every(&self, k: usize) -> (Dataset, Dataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, s) in self.segments.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                b.push(s.clone());
            } else {
                a.push(s.clone());
            }
        }
        (
            Dataset {
                montage: self.montage.clone(),
                segments: a,
            },
            Dataset {
                montage: self.montage.clone(),
                segments: b,
            },
        )
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Generate `n` segments on `montage` from `seed`.
pub fn synth_eeg(montage: Arc<MontageLayout>, n: usize, seed: u64, cfg: &SynthConfig) -> Result<Dataset> {
    let len = cfg.rate * cfg.seconds;
    if len < 1.0 || (len - len.round()).abs() > 1e-9 {
        return config("segment length must be a whole number of samples");
    }
    if cfg.n_classes.is_some_and(|k| !(2..=BANDS.len()).contains(&k)) {
        return config("synthetic class count must be 2 or 3");
    }
    if cfg.sources == 0 || cfg.spatial_sigma <= 0.0 || cfg.noise < 0.0 {
        return config("synthetic generator needs sources, positive spatial width and non-negative noise");
    }
    let t_len = len.round() as usize;
    let positions = montage.positions();
    let c = positions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise scale");
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let label = cfg.n_classes.map(|k| (i % k) as u32);
        let mut sources = vec![vec![0.0; t_len]; cfg.sources];
        let mut at = Vec::with_capacity(cfg.sources);
        for src in sources.iter_mut() {
            at.push(random_unit(&mut rng));
            for (b, &(lo, hi)) in BANDS.iter().enumerate() {
                let mut amp = cfg.band_amplitude[b] * rng.random_range(0.7..1.3);
                if label == Some(b as u32) {
                    amp *= cfg.class_gain;
                }
                let f = rng.random_range(lo..hi);
                let phase = rng.random_range(0.0..2.0 * PI);
                let w = 2.0 * PI * f / cfg.rate;
                for (t, v) in src.iter_mut().enumerate() {
                    *v += amp * (w * t as f64 + phase).sin();
                }
            }
        }
        let mut data = vec![0.0; c * t_len];
        for (ch, &pos) in positions.iter().enumerate() {
            let row = &mut data[ch * t_len..(ch + 1) * t_len];
            for (s, src) in sources.iter().enumerate() {
                let d = distance(pos, at[s]);
                let w = (-d * d / (2.0 * cfg.spatial_sigma * cfg.spatial_sigma)).exp();
                for (v, x) in row.iter_mut().zip(src) {
                    *v += w * x;
                }
            }
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            if cfg.normalize {
                zscore_in_place(row);
            }
        }
        let mut seg = EegSegment::new(data, c, cfg.rate, montage.clone())?.with_label(label);
        seg.preprocessed = cfg.normalize;
        segments.push(seg);
    }
    Ok(Dataset { montage, segments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let m = Arc::new(MontageLayout::standard_1020());
        let cfg = SynthConfig::default();
        let a = synth_eeg(m.clone(), 3, 9, &cfg).unwrap();
        let b = synth_eeg(m.clone(), 3, 9, &cfg).unwrap();
        let c = synth_eeg(m, 3, 10, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.segments[0].samples(), 1280);
    }

    #[test]
    fn labels_cycle() {
        let m = Arc::new(MontageLayout::standard_1020());
        let cfg = SynthConfig {
            n_classes: Some(3),
            ..SynthConfig::default()
        };
        let d = synth_eeg(m, 5, 1, &cfg).unwrap();
        assert_eq!(d.labels(), vec![Some(0), Some(1), Some(2), Some(0), Some(1)]);
        assert_eq!(d.n_classes(), 3);
    }
}
