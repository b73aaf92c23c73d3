//! Deterministic EEG preprocessing: filtering, resampling, montage
//! construction, windowing and normalization.

pub mod filter;
pub mod montage;
pub mod resample;
pub mod segment;

pub use filter::{bandpass, notch};
pub use montage::{bipolar_layout, standard_position, Electrode, MontageKind, MontageLayout, BIPOLAR_PAIRS};
pub use resample::resample;
pub use segment::{build_bipolar, preprocess, segment, zscore, EegSegment, PreprocessConfig};
