//! Synthetic paired PPG/ABP waveform generation.
//!
//! Both waveforms of a pair share one latent beat-onset train: a beat rate
//! drawn uniformly from the configured range plus a uniform phase offset.
//! The ABP trace is a baseline plus one Gaussian pressure pulse per onset;
//! the PPG trace fires a delayed main Gaussian pulse per onset (the pulse
//! transit delay) followed by a smaller dicrotic Gaussian. Optional white
//! Gaussian noise is added to both. Everything is a pure function of
//! `(seed, params)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SignalError, SignalKind, SignalSegment, SAMPLE_RATE, SEGMENT_LEN};
use crate::util::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Beat rate draw range in Hz (54 to 90 beats/min by default).
    pub rate_lo: f64,
    pub rate_hi: f64,
    /// Standard deviation of the additive white noise on both signals.
    pub noise: f64,
    /// Seconds between an ABP onset and the corresponding PPG pulse peak
    /// (pulse transit delay).
    pub pulse_delay: f64,
    pub ppg_amplitude: f64,
    /// Width (Gaussian sigma, seconds) of the main PPG pulse.
    pub ppg_width: f64,
    pub dicrotic_amplitude: f64,
    /// Seconds between the main PPG pulse and its dicrotic bump.
    pub dicrotic_delay: f64,
    pub dicrotic_width: f64,
    /// Diastolic floor of the ABP trace.
    pub abp_baseline: f64,
    /// Height of the systolic pulse above the baseline.
    pub abp_amplitude: f64,
    pub abp_width: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            rate_lo: 0.9,
            rate_hi: 1.5,
            noise: 0.0,
            pulse_delay: 0.20,
            ppg_amplitude: 1.0,
            ppg_width: 0.11,
            dicrotic_amplitude: 0.35,
            dicrotic_delay: 0.28,
            dicrotic_width: 0.09,
            abp_baseline: 0.40,
            abp_amplitude: 0.40,
            abp_width: 0.09,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.rate_lo > 0.0 && self.rate_lo <= self.rate_hi && self.rate_hi.is_finite()) {
            return Err(SignalError::RateRange { lo: self.rate_lo, hi: self.rate_hi });
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(SignalError::NoiseLevel(self.noise));
        }
        for width in [self.ppg_width, self.dicrotic_width, self.abp_width] {
            if width <= 0.0 || !width.is_finite() {
                return Err(SignalError::PulseWidth(width));
            }
        }
        Ok(())
    }
}

/// Generator-side ground truth for a pair, carried through manifests so
/// downstream metrics can score extracted SBP/DBP against it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    /// Systolic peak value of the noise-free ABP trace.
    pub sbp: f64,
    /// Diastolic floor value of the noise-free ABP trace.
    pub dbp: f64,
    /// Beat rate of the shared onset train, Hz.
    pub beat_rate: f64,
}

fn gaussian_pulse(t: f64, center: f64, sigma: f64) -> f64 {
    let z = (t - center) / sigma;
    (-0.5 * z * z).exp()
}

/// Generates one paired (PPG, ABP) segment. Deterministic in `(seed,
/// params)`; the two segments share `id`.
pub fn synth_pair(
    id: &str,
    seed: u64,
    params: &SynthParams,
) -> Result<(SignalSegment, SignalSegment, PairTruth), SignalError> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    let rate = rng.random_range(params.rate_lo..=params.rate_hi);
    let period = 1.0 / rate;
    let phase = rng.random_range(0.0..period);
    let duration = SEGMENT_LEN as f64 / SAMPLE_RATE;

    // Onsets extend past both edges so edge beats keep their full tails.
    let first = -2i64;
    let last = ((duration - phase) * rate).ceil() as i64 + 2;
    let onsets: Vec<f64> = (first..=last).map(|b| phase + b as f64 * period).collect();

    let mut ppg = vec![0.0; SEGMENT_LEN];
    let mut abp = vec![params.abp_baseline; SEGMENT_LEN];
    for (i, (p, a)) in ppg.iter_mut().zip(abp.iter_mut()).enumerate() {
        let t = i as f64 / SAMPLE_RATE;
        for &onset in &onsets {
            let arrival = onset + params.pulse_delay;
            *p += params.ppg_amplitude * gaussian_pulse(t, arrival, params.ppg_width);
            *p += params.dicrotic_amplitude
                * gaussian_pulse(t, arrival + params.dicrotic_delay, params.dicrotic_width);
            *a += params.abp_amplitude * gaussian_pulse(t, onset, params.abp_width);
        }
    }
    if params.noise > 0.0 {
        let normal = Normal::new(0.0, params.noise).expect("validated noise level");
        for p in &mut ppg {
            *p += normal.sample(&mut rng);
        }
        for a in &mut abp {
            *a += normal.sample(&mut rng);
        }
    }

    let truth = PairTruth {
        sbp: params.abp_baseline + params.abp_amplitude,
        dbp: params.abp_baseline,
        beat_rate: rate,
    };
    Ok((
        SignalSegment::new(id.to_string(), SignalKind::Ppg, ppg)?,
        SignalSegment::new(id.to_string(), SignalKind::Abp, abp)?,
        truth,
    ))
}
