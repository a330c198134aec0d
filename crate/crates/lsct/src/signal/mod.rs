//! Physiological waveform handling: fixed-length signal segments, the
//! contiguous-block corruption mask, synthetic paired-waveform generation,
//! the short-time Fourier transform and its inverse, and dataset file I/O.

mod io;
mod stft;
mod synth;

pub use io::{
    load_dataset, read_manifest, read_segment, write_manifest, write_segment, DataPair, Dataset,
    ManifestRecord, Split,
};
pub use stft::{cola_deviation, istft_operator, stft_operator, Spectrogram, StftConfig, StftPlan};
pub use synth::{synth_pair, PairTruth, SynthParams};

use rand::Rng;
use thiserror::Error;

use crate::util::rng_from_seed;

/// Sampling rate of every dataset segment, in hertz.
pub const SAMPLE_RATE: f64 = 125.0;
/// Number of samples in every dataset segment (8.192 s at 125 Hz).
pub const SEGMENT_LEN: usize = 1024;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("segment has {actual} samples, expected exactly {expected}")]
    SegmentLen { expected: usize, actual: usize },
    #[error("segment contains a non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("mask ratio {ratio} outside [0, 1)")]
    MaskRatio { ratio: f64 },
    #[error("beat-rate range [{lo}, {hi}] is empty or non-positive")]
    RateRange { lo: f64, hi: f64 },
    #[error("noise level {0} must be non-negative")]
    NoiseLevel(f64),
    #[error("pulse width {0} must be positive")]
    PulseWidth(f64),
    #[error("window length {window_len} must be a positive even multiple of hop {hop}")]
    WindowHop { window_len: usize, hop: usize },
    #[error("signal length {signal_len} incompatible with window {window_len}/hop {hop}")]
    SignalLen {
        signal_len: usize,
        window_len: usize,
        hop: usize,
    },
    #[error(
        "window/hop violates the constant-overlap-add condition (max deviation {deviation:e})"
    )]
    Cola { deviation: f64 },
    #[error("spectrogram is {frames}x{bins}, expected {expected_frames}x{expected_bins}")]
    SpectrogramShape {
        expected_frames: usize,
        expected_bins: usize,
        frames: usize,
        bins: usize,
    },
    #[error("inverse transform undefined: sample {sample} receives no window energy")]
    NotInvertible { sample: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("segment file {path} holds {actual} bytes, expected {expected}")]
    SegmentBytes {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("manifest {path}: {source}")]
    ManifestJson {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest references missing file {path}")]
    MissingFile { path: String },
    #[error("dataset mixes segment lengths: {first} vs {other} (record {id})")]
    MixedLengths {
        first: usize,
        other: usize,
        id: String,
    },
}

/// Which physiological quantity a segment records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// Photoplethysmography (the optical input signal).
    Ppg,
    /// Arterial blood pressure (the target signal).
    Abp,
}

/// A fixed-length, uniformly sampled waveform segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSegment {
    pub id: String,
    pub kind: SignalKind,
    samples: Vec<f64>,
}

impl SignalSegment {
    /// Validates length ([`SEGMENT_LEN`]) and finiteness.
    pub fn new(id: String, kind: SignalKind, samples: Vec<f64>) -> Result<Self, SignalError> {
        if samples.len() != SEGMENT_LEN {
            return Err(SignalError::SegmentLen {
                expected: SEGMENT_LEN,
                actual: samples.len(),
            });
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SignalError::NonFiniteSample { index });
        }
        Ok(Self { id, kind, samples })
    }

    #[must_use]
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[must_use]
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE
    }
}

/// Placement recipe for the synthetic-anomaly corruption: one contiguous
/// run of zeros covering `round(ratio * len)` samples at a seeded uniform
/// start position.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskConfig {
    /// Fraction of the segment to zero out; must lie in `[0, 1)`.
    pub ratio: f64,
    pub seed: u64,
}

/// The placed zero block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpan {
    pub start: usize,
    pub len: usize,
}

/// Draws the mask placement for a signal of length `n`.
pub fn mask_span(n: usize, cfg: &MaskConfig) -> Result<MaskSpan, SignalError> {
    if !(0.0..1.0).contains(&cfg.ratio) {
        return Err(SignalError::MaskRatio { ratio: cfg.ratio });
    }
    let len = (cfg.ratio * n as f64).round() as usize;
    if len == 0 {
        return Ok(MaskSpan { start: 0, len: 0 });
    }
    let mut rng = rng_from_seed(cfg.seed);
    let start = rng.random_range(0..=n - len);
    Ok(MaskSpan { start, len })
}

/// Zeroes one contiguous block of `round(ratio * len)` samples. The input
/// is untouched; a masked copy is returned.
pub fn mask_samples(samples: &[f64], cfg: &MaskConfig) -> Result<Vec<f64>, SignalError> {
    let span = mask_span(samples.len(), cfg)?;
    let mut out = samples.to_vec();
    out[span.start..span.start + span.len].fill(0.0);
    Ok(out)
}

/// [`mask_samples`] lifted to a [`SignalSegment`].
pub fn apply_mask(seg: &SignalSegment, cfg: &MaskConfig) -> Result<SignalSegment, SignalError> {
    let samples = mask_samples(seg.samples(), cfg)?;
    SignalSegment::new(seg.id.clone(), seg.kind, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segment(fill: f64) -> SignalSegment {
        SignalSegment::new("s".into(), SignalKind::Ppg, vec![fill; SEGMENT_LEN]).unwrap()
    }

    #[test]
    fn segment_rejects_wrong_length_and_non_finite() {
        let err = SignalSegment::new("s".into(), SignalKind::Ppg, vec![0.0; 100]).unwrap_err();
        assert!(matches!(err, SignalError::SegmentLen { expected: 1024, actual: 100 }));
        let mut bad = vec![0.0; SEGMENT_LEN];
        bad[17] = f64::NAN;
        let err = SignalSegment::new("s".into(), SignalKind::Abp, bad).unwrap_err();
        assert!(matches!(err, SignalError::NonFiniteSample { index: 17 }));
    }

    #[test]
    fn mask_zeroes_one_contiguous_block_of_rounded_size() {
        // round(0.1 * 1024) = 102 zeros.
        let seg = segment(1.0);
        let cfg = MaskConfig { ratio: 0.1, seed: 3 };
        let masked = apply_mask(&seg, &cfg).unwrap();
        let zeros = masked.samples().iter().filter(|&&s| s == 0.0).count();
        assert_eq!(zeros, 102);
        // Contiguity: the zero run has a single start and a single end.
        let mut transitions = 0;
        for w in masked.samples().windows(2) {
            if (w[0] == 0.0) != (w[1] == 0.0) {
                transitions += 1;
            }
        }
        assert!(transitions <= 2);
    }

    #[test]
    fn mask_is_deterministic_per_seed() {
        let seg = segment(2.0);
        let cfg = MaskConfig { ratio: 0.3, seed: 99 };
        let a = apply_mask(&seg, &cfg).unwrap();
        let b = apply_mask(&seg, &cfg).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = apply_mask(&seg, &MaskConfig { ratio: 0.3, seed: 100 }).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn zero_ratio_is_identity() {
        let seg = segment(1.5);
        let cfg = MaskConfig { ratio: 0.0, seed: 1 };
        let masked = apply_mask(&seg, &cfg).unwrap();
        assert_eq!(masked.samples(), seg.samples());
    }

    #[test]
    fn mask_ratio_one_is_rejected() {
        let seg = segment(1.0);
        for ratio in [1.0, 1.5, -0.1] {
            let err = apply_mask(&seg, &MaskConfig { ratio, seed: 0 }).unwrap_err();
            assert!(matches!(err, SignalError::MaskRatio { .. }));
        }
    }

    #[test]
    fn mask_start_is_uniform_over_valid_range() {
        // All observed starts stay within [0, n - len] and vary with seed.
        let n = SEGMENT_LEN;
        let mut starts = std::collections::HashSet::new();
        for seed in 0..50 {
            let span = mask_span(n, &MaskConfig { ratio: 0.5, seed }).unwrap();
            assert_eq!(span.len, 512);
            assert!(span.start <= n - span.len);
            starts.insert(span.start);
        }
        assert!(starts.len() > 10, "mask starts barely vary: {}", starts.len());
    }
}
