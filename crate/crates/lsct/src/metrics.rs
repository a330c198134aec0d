//! Evaluation metrics and reporting.
//!
//! Three per-segment scores: root-mean-square error, percentage
//! root-mean-square difference (PRD), and the discrete Fréchet distance.
//! PRD is computed as printed in its source — `sqrt(100 * ratio)` — which
//! differs from the conventional `100 * sqrt(ratio)`; both are exposed.
//! Likewise the Fréchet pairwise cost defaults to the squared difference
//! as printed, with the conventional unsquared form available. A
//! brute-force coupling enumerator serves as the oracle for the dynamic
//! program. SBP/DBP extraction locates beats by prominence-filtered peak
//! picking for a downstream-style blood-pressure report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::signal::{mask_samples, DataPair, MaskConfig, SignalError};
use crate::util::mix;

/// Longest sequence [`frechet_bruteforce`] accepts.
pub const BRUTE_FORCE_MAX: usize = 10;
/// Minimum beat spacing for peak picking, seconds.
pub const PEAK_SPACING_S: f64 = 0.33;
/// Required peak prominence, as a fraction of the segment's range.
pub const PEAK_PROMINENCE_FRAC: f64 = 0.25;
/// Segments evaluated per forward pass.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sequences have different lengths: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("metric over an empty sequence")]
    Empty,
    #[error("PRD undefined for an all-zero reference")]
    ZeroReference,
    #[error("brute-force Fréchet limited to length {max}, got {len}")]
    TooLong { len: usize, max: usize },
    #[error("no readable beats: fewer than two qualifying peaks")]
    NoBeats,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization: {0}")]
    Json(#[source] serde_json::Error),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_pair(s: &[f64], s_hat: &[f64]) -> Result<(), MetricsError> {
    if s.is_empty() || s_hat.is_empty() {
        return Err(MetricsError::Empty);
    }
    if s.len() != s_hat.len() {
        return Err(MetricsError::LengthMismatch { lhs: s.len(), rhs: s_hat.len() });
    }
    Ok(())
}

/// `sqrt(mean((s - s_hat)^2))`.
pub fn rmse(s: &[f64], s_hat: &[f64]) -> Result<f64, MetricsError> {
    check_pair(s, s_hat)?;
    let sq: f64 = s.iter().zip(s_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / s.len() as f64).sqrt())
}

fn prd_ratio(s: &[f64], s_hat: &[f64]) -> Result<f64, MetricsError> {
    check_pair(s, s_hat)?;
    let num: f64 = s.iter().zip(s_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = s.iter().map(|a| a * a).sum();
    if den == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok(num / den)
}

/// Percentage root-mean-square difference, exactly as printed in its
/// source: `sqrt(100 * sum((s - s_hat)^2) / sum(s^2))`. Note the factor
/// 100 sits inside the root; see [`prd_conventional`].
pub fn prd(s: &[f64], s_hat: &[f64]) -> Result<f64, MetricsError> {
    Ok((100.0 * prd_ratio(s, s_hat)?).sqrt())
}

/// The conventional PRD, `100 * sqrt(ratio)` — the square of the printed
/// form's 100 lives outside the root here.
pub fn prd_conventional(s: &[f64], s_hat: &[f64]) -> Result<f64, MetricsError> {
    Ok(100.0 * prd_ratio(s, s_hat)?.sqrt())
}

fn frechet_with(
    s: &[f64],
    s_hat: &[f64],
    cost: impl Fn(f64, f64) -> f64,
) -> Result<f64, MetricsError> {
    if s.is_empty() || s_hat.is_empty() {
        return Err(MetricsError::Empty);
    }
    // Standard discrete-Fréchet dynamic program with a rolling pair of
    // rows: d(i,j) = max(cost(i,j), min(d(i-1,j), d(i,j-1), d(i-1,j-1))).
    let m = s_hat.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &a) in s.iter().enumerate() {
        for (j, &b) in s_hat.iter().enumerate() {
            let c = cost(a, b);
            let best = match (i, j) {
                (0, 0) => c,
                (0, _) => c.max(cur[j - 1]),
                (_, 0) => c.max(prev[0]),
                _ => c.max(prev[j].min(cur[j - 1]).min(prev[j - 1])),
            };
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Discrete Fréchet distance over scalar samples with the squared
/// difference as pairwise cost (the form printed in the source).
pub fn frechet(s: &[f64], s_hat: &[f64]) -> Result<f64, MetricsError> {
    frechet_with(s, s_hat, |a, b| (a - b) * (a - b))
}

/// Discrete Fréchet distance with the conventional absolute-difference
/// cost.
pub fn frechet_unsquared(s: &[f64], s_hat: &[f64]) -> Result<f64, MetricsError> {
    frechet_with(s, s_hat, |a, b| (a - b).abs())
}

/// Exhaustively enumerates every monotone coupling (short sequences only)
/// and minimizes the maximum squared-difference cost. The independent
/// oracle for [`frechet`].
pub fn frechet_bruteforce(s: &[f64], s_hat: &[f64]) -> Result<f64, MetricsError> {
    if s.is_empty() || s_hat.is_empty() {
        return Err(MetricsError::Empty);
    }
    for len in [s.len(), s_hat.len()] {
        if len > BRUTE_FORCE_MAX {
            return Err(MetricsError::TooLong { len, max: BRUTE_FORCE_MAX });
        }
    }
    fn go(s: &[f64], t: &[f64], i: usize, j: usize) -> f64 {
        let c = (s[i] - t[j]) * (s[i] - t[j]);
        if i + 1 == s.len() && j + 1 == t.len() {
            return c;
        }
        let mut best = f64::INFINITY;
        if i + 1 < s.len() {
            best = best.min(go(s, t, i + 1, j));
        }
        if j + 1 < t.len() {
            best = best.min(go(s, t, i, j + 1));
        }
        if i + 1 < s.len() && j + 1 < t.len() {
            best = best.min(go(s, t, i + 1, j + 1));
        }
        c.max(best)
    }
    Ok(go(s, s_hat, 0, 0))
}

/// Indices of local maxima with prominence at least
/// [`PEAK_PROMINENCE_FRAC`] of the signal's range, thinned to a minimum
/// spacing of [`PEAK_SPACING_S`] (taller peaks win).
fn find_beats(x: &[f64], sample_rate: f64) -> Vec<usize> {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_prominence = PEAK_PROMINENCE_FRAC * (hi - lo);
    let mut candidates = Vec::new();
    for i in 1..x.len().saturating_sub(1) {
        if !(x[i] > x[i - 1] && x[i] >= x[i + 1]) {
            continue;
        }
        // Prominence: walk each side until a higher sample (or the edge),
        // take the minimum over the walk, and measure against the higher
        // of the two bases.
        let mut left_base = x[i];
        for k in (0..i).rev() {
            if x[k] > x[i] {
                break;
            }
            left_base = left_base.min(x[k]);
        }
        let mut right_base = x[i];
        for &v in &x[i + 1..] {
            if v > x[i] {
                break;
            }
            right_base = right_base.min(v);
        }
        let prominence = x[i] - left_base.max(right_base);
        if prominence >= min_prominence && min_prominence > 0.0 {
            candidates.push(i);
        }
    }
    // Enforce spacing, keeping taller peaks first (index breaks ties).
    let spacing = (PEAK_SPACING_S * sample_rate) as usize;
    let mut by_height = candidates.clone();
    by_height.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in by_height {
        if kept.iter().all(|&k| k.abs_diff(i) >= spacing) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Mean systolic (beat maxima) and diastolic (inter-beat minima) values of
/// an arterial-pressure waveform. Needs at least two qualifying beats.
pub fn extract_sbp_dbp(samples: &[f64], sample_rate: f64) -> Result<(f64, f64), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let peaks = find_beats(samples, sample_rate);
    if peaks.len() < 2 {
        return Err(MetricsError::NoBeats);
    }
    let sbp = peaks.iter().map(|&p| samples[p]).sum::<f64>() / peaks.len() as f64;
    let mut troughs = 0.0;
    for pair in peaks.windows(2) {
        troughs += samples[pair[0]..=pair[1]].iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let dbp = troughs / (peaks.len() - 1) as f64;
    Ok((sbp, dbp))
}

/// One evaluated segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub id: String,
    pub rmse: f64,
    pub prd: f64,
    pub fd: f64,
}

/// Mean and population standard deviation of one metric across segments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

fn aggregate(values: impl Iterator<Item = f64> + Clone) -> Aggregate {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Aggregate { mean, std: var.sqrt() }
}

/// Mean absolute error, mean error, and error standard deviation of an
/// extracted blood-pressure value against generator ground truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BpErrors {
    pub mae: f64,
    pub me: f64,
    pub sd: f64,
}

/// Everything measured at one mask ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mask_ratio: f64,
    pub segments: Vec<SegmentMetrics>,
    pub rmse: Aggregate,
    pub prd: Aggregate,
    pub fd: Aggregate,
    /// Extracted-vs-truth systolic pressure errors, when ground truth is
    /// available and at least one extraction succeeded.
    pub sbp: Option<BpErrors>,
    pub dbp: Option<BpErrors>,
    /// Segments contributing to the blood-pressure rows.
    pub bp_segments: usize,
}

fn bp_errors(errors: &[f64]) -> BpErrors {
    let agg = aggregate(errors.iter().copied());
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len().max(1) as f64;
    BpErrors { mae, me: agg.mean, sd: agg.std }
}

/// The mask seed [`evaluate`] uses for one `(ratio, segment)` slot, exposed
/// so callers can regenerate the exact masked input behind a reported
/// score (e.g. for plotting).
#[must_use]
pub fn eval_mask_seed(seed: u64, ratio_index: usize, segment_index: usize) -> u64 {
    mix(&[seed, ratio_index as u64, segment_index as u64])
}

/// Runs the model over `pairs` at each mask ratio: the PPG input is masked
/// with a ratio- and segment-specific seed derived from `seed`, the
/// reconstruction is scored against the true ABP trace, and per-ratio
/// aggregates are collected. Deterministic given `(model, pairs, ratios,
/// seed)`.
pub fn evaluate(
    model: &mut Model,
    pairs: &[&DataPair],
    mask_ratios: &[f64],
    seed: u64,
) -> Result<Vec<MetricsReport>, MetricsError> {
    let seg_len = model.config.signal_len;
    let mut reports = Vec::with_capacity(mask_ratios.len());
    for (ri, &ratio) in mask_ratios.iter().enumerate() {
        let mut segments = Vec::with_capacity(pairs.len());
        let mut sbp_errors = Vec::new();
        let mut dbp_errors = Vec::new();
        for (ci, chunk) in pairs.chunks(EVAL_BATCH).enumerate() {
            let mut masked = Vec::with_capacity(chunk.len() * seg_len);
            for (si, pair) in chunk.iter().enumerate() {
                let index = ci * EVAL_BATCH + si;
                let cfg = MaskConfig { ratio, seed: eval_mask_seed(seed, ri, index) };
                masked.extend(mask_samples(pair.ppg.samples(), &cfg)?);
            }
            model.reset_tape();
            let out = model.forward(&masked)?;
            let x_hat = model.graph.data(out.x_hat).to_vec();
            for (si, pair) in chunk.iter().enumerate() {
                let pred = &x_hat[si * seg_len..(si + 1) * seg_len];
                let truth = pair.abp.samples();
                segments.push(SegmentMetrics {
                    id: pair.id.clone(),
                    rmse: rmse(truth, pred)?,
                    prd: prd(truth, pred)?,
                    fd: frechet(truth, pred)?,
                });
                if let Some(t) = pair.truth {
                    if let Ok((sbp, dbp)) = extract_sbp_dbp(pred, crate::signal::SAMPLE_RATE) {
                        sbp_errors.push(sbp - t.sbp);
                        dbp_errors.push(dbp - t.dbp);
                    }
                }
            }
        }
        let sbp = (!sbp_errors.is_empty()).then(|| bp_errors(&sbp_errors));
        let dbp = (!dbp_errors.is_empty()).then(|| bp_errors(&dbp_errors));
        reports.push(MetricsReport {
            mask_ratio: ratio,
            rmse: aggregate(segments.iter().map(|s| s.rmse)),
            prd: aggregate(segments.iter().map(|s| s.prd)),
            fd: aggregate(segments.iter().map(|s| s.fd)),
            bp_segments: sbp_errors.len(),
            segments,
            sbp,
            dbp,
        });
    }
    Ok(reports)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders reports as CSV: one row per mask ratio, metrics as columns.
#[must_use]
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "mask_ratio,segments,rmse_mean,rmse_std,prd_mean,prd_std,fd_mean,fd_std,\
         bp_segments,sbp_mae,sbp_me,sbp_sd,dbp_mae,dbp_me,dbp_sd\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.mask_ratio,
            r.segments.len(),
            r.rmse.mean,
            r.rmse.std,
            r.prd.mean,
            r.prd.std,
            r.fd.mean,
            r.fd.std,
            r.bp_segments,
            opt(r.sbp.map(|b| b.mae)),
            opt(r.sbp.map(|b| b.me)),
            opt(r.sbp.map(|b| b.sd)),
            opt(r.dbp.map(|b| b.mae)),
            opt(r.dbp.map(|b| b.me)),
            opt(r.dbp.map(|b| b.sd)),
        );
    }
    out
}

/// Writes the CSV summary (one row per mask ratio).
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), MetricsError> {
    fs::write(path, reports_to_csv(reports))
        .map_err(|e| MetricsError::Io { path: path.display().to_string(), source: e })
}

/// Writes the full per-segment detail as pretty JSON.
pub fn write_reports_json(path: &Path, reports: &[MetricsReport]) -> Result<(), MetricsError> {
    let json = serde_json::to_string_pretty(reports).map_err(MetricsError::Json)?;
    fs::write(path, json)
        .map_err(|e| MetricsError::Io { path: path.display().to_string(), source: e })
}
