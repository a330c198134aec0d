//! Short-time Fourier transform and its inverse as explicit, adjoint-backed
//! linear maps.
//!
//! Both directions implement [`LinearOperator`], so the model can route
//! gradients through them. The analysis side frames the signal with a
//! periodic Hann window (centered framing uses reflect padding), and takes a
//! real DFT per frame. The synthesis side applies the inverse DFT, windows
//! again, folds reflected positions back into range, and divides by the
//! accumulated squared-window energy per sample — which makes
//! `istft(stft(x)) == x` exact up to float rounding for every invertible
//! plan, including segment edges.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SignalError;
use crate::tensor::LinearOperator;

/// Analysis parameters. The window is always a periodic Hann window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    /// Centered framing: frame `t` is centred on sample `t * hop`, with
    /// reflect padding at the segment edges. `false` packs frames from
    /// sample 0 without padding.
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_len: 64, hop: 16, centered: true }
    }
}

/// Complex spectra of a framed signal, stored as two real planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    /// Real plane, `frames x bins`, row-major.
    pub re: Vec<f64>,
    /// Imaginary plane, `frames x bins`, row-major.
    pub im: Vec<f64>,
}

impl Spectrogram {
    /// Flattens to the model's token layout: one row per frame holding
    /// `[re_0 .. re_{B-1}, im_0 .. im_{B-1}]` (shape `frames x 2*bins`).
    #[must_use]
    pub fn features(&self) -> Vec<f64> {
        let b = self.bins;
        let mut out = vec![0.0; self.frames * 2 * b];
        for t in 0..self.frames {
            out[t * 2 * b..t * 2 * b + b].copy_from_slice(&self.re[t * b..(t + 1) * b]);
            out[t * 2 * b + b..(t + 1) * 2 * b].copy_from_slice(&self.im[t * b..(t + 1) * b]);
        }
        out
    }

    /// Inverse of [`Spectrogram::features`].
    pub fn from_features(frames: usize, bins: usize, feat: &[f64]) -> Result<Self, SignalError> {
        if feat.len() != frames * 2 * bins {
            return Err(SignalError::SpectrogramShape {
                expected_frames: frames,
                expected_bins: bins,
                frames: feat.len() / (2 * bins.max(1)),
                bins,
            });
        }
        let mut re = vec![0.0; frames * bins];
        let mut im = vec![0.0; frames * bins];
        for t in 0..frames {
            re[t * bins..(t + 1) * bins].copy_from_slice(&feat[t * 2 * bins..t * 2 * bins + bins]);
            im[t * bins..(t + 1) * bins]
                .copy_from_slice(&feat[t * 2 * bins + bins..(t + 1) * 2 * bins]);
        }
        Ok(Self { frames, bins, re, im })
    }
}

/// Precomputed transform plan for one signal length: window, DFT tables,
/// frame-to-sample index map (reflection resolved), and the per-sample
/// overlap-add normalizer.
#[derive(Debug)]
pub struct StftPlan {
    pub config: StftConfig,
    pub signal_len: usize,
    pub frames: usize,
    pub bins: usize,
    window: Vec<f64>,
    /// `cos[j * bins + k] = cos(2 pi j k / window_len)`.
    cos: Vec<f64>,
    sin: Vec<f64>,
    /// `index_map[t * window_len + j]` = signal sample feeding frame `t`,
    /// position `j`.
    index_map: Vec<usize>,
    /// `ola_norm[s]` = total squared window weight landing on sample `s`.
    ola_norm: Vec<f64>,
    /// First sample with (numerically) zero window coverage, if any; such a
    /// plan cannot be inverted.
    degenerate: Option<usize>,
}

/// Periodic Hann window of length `w`.
fn hann(w: usize) -> Vec<f64> {
    (0..w)
        .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / w as f64).cos()))
        .collect()
}

/// Maximum deviation from constancy of `sum_t w^2[j - t*hop]` over an
/// infinite frame tiling.
#[must_use]
pub fn cola_deviation(window: &[f64], hop: usize) -> f64 {
    let w = window.len();
    let sums: Vec<f64> = (0..hop)
        .map(|j| (j..w).step_by(hop).map(|i| window[i] * window[i]).sum())
        .collect();
    let first = sums[0];
    sums.iter().map(|s| (s - first).abs()).fold(0.0, f64::max)
}

impl StftPlan {
    pub fn new(signal_len: usize, config: StftConfig) -> Result<Self, SignalError> {
        let w = config.window_len;
        let hop = config.hop;
        if w == 0 || hop == 0 || !w.is_multiple_of(2) || !w.is_multiple_of(hop) {
            return Err(SignalError::WindowHop { window_len: w, hop });
        }
        let window = hann(w);
        let deviation = cola_deviation(&window, hop);
        if deviation > 1e-10 {
            return Err(SignalError::Cola { deviation });
        }
        let frames = if config.centered {
            if !signal_len.is_multiple_of(hop) || signal_len < w {
                return Err(SignalError::SignalLen { signal_len, window_len: w, hop });
            }
            signal_len / hop
        } else {
            if signal_len < w || !(signal_len - w).is_multiple_of(hop) {
                return Err(SignalError::SignalLen { signal_len, window_len: w, hop });
            }
            (signal_len - w) / hop + 1
        };
        let bins = w / 2 + 1;
        let mut cos = vec![0.0; w * bins];
        let mut sin = vec![0.0; w * bins];
        for j in 0..w {
            for k in 0..bins {
                let theta = 2.0 * std::f64::consts::PI * (j * k) as f64 / w as f64;
                cos[j * bins + k] = theta.cos();
                sin[j * bins + k] = theta.sin();
            }
        }
        let offset = if config.centered { (w / 2) as isize } else { 0 };
        let n = signal_len as isize;
        let mut index_map = vec![0usize; frames * w];
        let mut ola_norm = vec![0.0; signal_len];
        for t in 0..frames {
            for j in 0..w {
                let mut s = (t * hop) as isize + j as isize - offset;
                // Reflect (without repeating the edge sample); a single
                // application suffices because the overhang is < w <= len.
                if s < 0 {
                    s = -s;
                }
                if s >= n {
                    s = 2 * n - 2 - s;
                }
                let s = s as usize;
                index_map[t * w + j] = s;
                ola_norm[s] += window[j] * window[j];
            }
        }
        let degenerate = ola_norm.iter().position(|&v| v <= 1e-12);
        Ok(Self {
            config,
            signal_len,
            frames,
            bins,
            window,
            cos,
            sin,
            index_map,
            ola_norm,
            degenerate,
        })
    }

    /// `[frames, 2 * bins]`, the token layout the model consumes.
    #[must_use]
    pub fn feature_shape(&self) -> [usize; 2] {
        [self.frames, 2 * self.bins]
    }

    fn check_signal(&self, x: &[f64]) -> Result<(), SignalError> {
        if x.len() != self.signal_len {
            return Err(SignalError::SegmentLen { expected: self.signal_len, actual: x.len() });
        }
        Ok(())
    }

    /// Analysis: frame `t`, bin `k` holds
    /// `sum_j w[j] x[t*hop + j - off] e^{-2 pi i j k / W}`.
    pub fn forward(&self, x: &[f64]) -> Result<Spectrogram, SignalError> {
        self.check_signal(x)?;
        let mut feat = vec![0.0; self.frames * 2 * self.bins];
        self.forward_flat(x, &mut feat);
        Spectrogram::from_features(self.frames, self.bins, &feat)
    }

    /// Synthesis: weighted overlap-add with the analysis window, followed by
    /// the per-sample overlap normalizer. Exact left inverse of
    /// [`StftPlan::forward`].
    pub fn inverse(&self, spec: &Spectrogram) -> Result<Vec<f64>, SignalError> {
        if spec.frames != self.frames || spec.bins != self.bins {
            return Err(SignalError::SpectrogramShape {
                expected_frames: self.frames,
                expected_bins: self.bins,
                frames: spec.frames,
                bins: spec.bins,
            });
        }
        if let Some(sample) = self.degenerate {
            return Err(SignalError::NotInvertible { sample });
        }
        let feat = spec.features();
        let mut out = vec![0.0; self.signal_len];
        self.inverse_flat(&feat, &mut out);
        Ok(out)
    }

    // --- flat kernels over the feature layout (frames x [re.., im..]) ---

    fn forward_flat(&self, x: &[f64], out: &mut [f64]) {
        let (w, b) = (self.config.window_len, self.bins);
        out.fill(0.0);
        for t in 0..self.frames {
            let frame = &mut out[t * 2 * b..(t + 1) * 2 * b];
            for j in 0..w {
                let v = self.window[j] * x[self.index_map[t * w + j]];
                let crow = &self.cos[j * b..(j + 1) * b];
                let srow = &self.sin[j * b..(j + 1) * b];
                for k in 0..b {
                    frame[k] += v * crow[k];
                    frame[b + k] -= v * srow[k];
                }
            }
        }
    }

    fn forward_adjoint_flat(&self, cotangent: &[f64], out: &mut [f64]) {
        let (w, b) = (self.config.window_len, self.bins);
        out.fill(0.0);
        for t in 0..self.frames {
            let frame = &cotangent[t * 2 * b..(t + 1) * 2 * b];
            for j in 0..w {
                let crow = &self.cos[j * b..(j + 1) * b];
                let srow = &self.sin[j * b..(j + 1) * b];
                let mut acc = 0.0;
                for k in 0..b {
                    acc += frame[k] * crow[k] - frame[b + k] * srow[k];
                }
                out[self.index_map[t * w + j]] += self.window[j] * acc;
            }
        }
    }

    fn inverse_flat(&self, feat: &[f64], out: &mut [f64]) {
        let (w, b) = (self.config.window_len, self.bins);
        let inv_w = 1.0 / w as f64;
        out.fill(0.0);
        let mut c = vec![0.0; b];
        let mut s = vec![0.0; b];
        for t in 0..self.frames {
            let frame = &feat[t * 2 * b..(t + 1) * 2 * b];
            // Hermitian half-spectrum weights: interior bins count twice.
            for k in 0..b {
                let g = if k == 0 || k == b - 1 { 1.0 } else { 2.0 };
                c[k] = g * inv_w * frame[k];
                s[k] = g * inv_w * frame[b + k];
            }
            for j in 0..w {
                let crow = &self.cos[j * b..(j + 1) * b];
                let srow = &self.sin[j * b..(j + 1) * b];
                let mut acc = 0.0;
                for k in 0..b {
                    acc += c[k] * crow[k] - s[k] * srow[k];
                }
                out[self.index_map[t * w + j]] += self.window[j] * acc;
            }
        }
        for (o, norm) in out.iter_mut().zip(&self.ola_norm) {
            *o /= norm;
        }
    }

    fn inverse_adjoint_flat(&self, cotangent: &[f64], out: &mut [f64]) {
        let (w, b) = (self.config.window_len, self.bins);
        let inv_w = 1.0 / w as f64;
        let z: Vec<f64> = cotangent.iter().zip(&self.ola_norm).map(|(y, n)| y / n).collect();
        out.fill(0.0);
        for t in 0..self.frames {
            let frame = &mut out[t * 2 * b..(t + 1) * 2 * b];
            for j in 0..w {
                let v = self.window[j] * z[self.index_map[t * w + j]];
                let crow = &self.cos[j * b..(j + 1) * b];
                let srow = &self.sin[j * b..(j + 1) * b];
                for k in 0..b {
                    let g = if k == 0 || k == b - 1 { 1.0 } else { 2.0 };
                    frame[k] += g * inv_w * v * crow[k];
                    frame[b + k] -= g * inv_w * v * srow[k];
                }
            }
        }
    }
}

/// Differentiable analysis operator: `[signal_len] -> [frames, 2*bins]`.
pub struct StftOperator {
    plan: Arc<StftPlan>,
    in_shape: [usize; 1],
    out_shape: [usize; 2],
}

/// Differentiable synthesis operator: `[frames, 2*bins] -> [signal_len]`.
pub struct IstftOperator {
    plan: Arc<StftPlan>,
    in_shape: [usize; 2],
    out_shape: [usize; 1],
}

/// Builds the graph-pluggable analysis operator.
pub fn stft_operator(plan: &Arc<StftPlan>) -> Arc<dyn LinearOperator> {
    Arc::new(StftOperator {
        plan: Arc::clone(plan),
        in_shape: [plan.signal_len],
        out_shape: plan.feature_shape(),
    })
}

/// Builds the graph-pluggable synthesis operator; fails when some sample
/// receives no window energy (the plan is not invertible).
pub fn istft_operator(plan: &Arc<StftPlan>) -> Result<Arc<dyn LinearOperator>, SignalError> {
    if let Some(sample) = plan.degenerate {
        return Err(SignalError::NotInvertible { sample });
    }
    Ok(Arc::new(IstftOperator {
        plan: Arc::clone(plan),
        in_shape: plan.feature_shape(),
        out_shape: [plan.signal_len],
    }))
}

impl LinearOperator for StftOperator {
    fn input_shape(&self) -> &[usize] {
        &self.in_shape
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.plan.forward_flat(x, out);
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.plan.forward_adjoint_flat(y, out);
    }
    fn name(&self) -> &'static str {
        "stft"
    }
}

impl LinearOperator for IstftOperator {
    fn input_shape(&self) -> &[usize] {
        &self.in_shape
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.plan.inverse_flat(x, out);
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.plan.inverse_adjoint_flat(y, out);
    }
    fn name(&self) -> &'static str {
        "istft"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::util::rng_from_seed;

    fn default_plan() -> Arc<StftPlan> {
        Arc::new(StftPlan::new(1024, StftConfig::default()).unwrap())
    }

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Independent oracle: reflect-pad, window, and take a naive full DFT
    /// of one frame, straight from the transform definition.
    fn oracle_frame(x: &[f64], t: usize, cfg: &StftConfig) -> (Vec<f64>, Vec<f64>) {
        let w = cfg.window_len;
        let n = x.len() as isize;
        let offset = if cfg.centered { (w / 2) as isize } else { 0 };
        let win = hann(w);
        let framed: Vec<f64> = (0..w)
            .map(|j| {
                let mut s = (t * cfg.hop) as isize + j as isize - offset;
                if s < 0 {
                    s = -s;
                }
                if s >= n {
                    s = 2 * n - 2 - s;
                }
                win[j] * x[s as usize]
            })
            .collect();
        let bins = w / 2 + 1;
        let mut re = vec![0.0; bins];
        let mut im = vec![0.0; bins];
        for k in 0..bins {
            for (j, &v) in framed.iter().enumerate() {
                let theta = 2.0 * std::f64::consts::PI * (j * k) as f64 / w as f64;
                re[k] += v * theta.cos();
                im[k] -= v * theta.sin();
            }
        }
        (re, im)
    }

    #[test]
    fn default_geometry_is_64_frames_by_33_bins() {
        let plan = default_plan();
        assert_eq!(plan.frames, 64);
        assert_eq!(plan.bins, 33);
        assert_eq!(plan.feature_shape(), [64, 66]);
    }

    #[test]
    fn hann_16_hop_satisfies_cola_tightly() {
        let dev = cola_deviation(&hann(64), 16);
        assert!(dev < 1e-10, "deviation {dev}");
        // The constant itself is 1.5 for a periodic Hann at 75% overlap.
        let c: f64 = (0..64).step_by(16).map(|i| hann(64)[i] * hann(64)[i]).sum();
        assert!((c - 1.5).abs() < 1e-12);
    }

    #[test]
    fn half_overlap_hann_violates_cola_and_is_rejected() {
        let err = StftPlan::new(1024, StftConfig { window_len: 64, hop: 32, centered: true })
            .unwrap_err();
        assert!(matches!(err, SignalError::Cola { .. }));
    }

    #[test]
    fn zero_signal_maps_to_zero_spectrogram() {
        let plan = default_plan();
        let spec = plan.forward(&vec![0.0; 1024]).unwrap();
        assert!(spec.re.iter().chain(&spec.im).all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_linear() {
        let plan = default_plan();
        let x = random_signal(1024, 1);
        let y = random_signal(1024, 2);
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
        let sx = plan.forward(&x).unwrap();
        let sy = plan.forward(&y).unwrap();
        let sc = plan.forward(&combo).unwrap();
        for i in 0..sx.re.len() {
            assert!((sc.re[i] - (a * sx.re[i] + b * sy.re[i])).abs() < 1e-9);
            assert!((sc.im[i] - (a * sx.im[i] + b * sy.im[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_matches_full_dft_oracle() {
        let plan = default_plan();
        let x = random_signal(1024, 3);
        let spec = plan.forward(&x).unwrap();
        for t in [0, 1, 31, 62, 63] {
            let (re, im) = oracle_frame(&x, t, &plan.config);
            for k in 0..plan.bins {
                assert!(
                    (spec.re[t * plan.bins + k] - re[k]).abs() < 1e-10,
                    "frame {t} bin {k} re"
                );
                assert!(
                    (spec.im[t * plan.bins + k] - im[k]).abs() < 1e-10,
                    "frame {t} bin {k} im"
                );
            }
        }
    }

    #[test]
    fn pure_bin3_cosine_concentrates_at_bin3() {
        // x has exactly 3 cycles per 64-sample window. A Hann window
        // spreads a pure tone over the adjacent bins (half amplitude each
        // side), so bin 3 is the peak and bins {2,3,4} carry essentially
        // all frame energy.
        let plan = default_plan();
        let x: Vec<f64> = (0..1024)
            .map(|s| (2.0 * std::f64::consts::PI * 3.0 * s as f64 / 64.0).cos())
            .collect();
        let spec = plan.forward(&x).unwrap();
        for t in 8..56 {
            // interior frames: no reflection effects
            let energy: Vec<f64> = (0..plan.bins)
                .map(|k| {
                    let g = if k == 0 || k == plan.bins - 1 { 1.0 } else { 2.0 };
                    let (re, im) = (spec.re[t * plan.bins + k], spec.im[t * plan.bins + k]);
                    g * (re * re + im * im)
                })
                .collect();
            let total: f64 = energy.iter().sum();
            let peak = energy
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, 3, "frame {t}");
            let neighborhood = energy[2] + energy[3] + energy[4];
            assert!(neighborhood / total > 0.99, "frame {t}: {}", neighborhood / total);
        }
    }

    #[test]
    fn round_trip_is_exact_to_1e6() {
        let plan = default_plan();
        for seed in 0..10 {
            let x = random_signal(1024, 100 + seed);
            let spec = plan.forward(&x).unwrap();
            let y = plan.inverse(&spec).unwrap();
            let max_err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max_err < 1e-6, "seed {seed}: max err {max_err}");
        }
    }

    #[test]
    fn inverse_is_linear() {
        let plan = default_plan();
        let sx = plan.forward(&random_signal(1024, 11)).unwrap();
        let sy = plan.forward(&random_signal(1024, 12)).unwrap();
        let (a, b) = (2.0, -0.5);
        let mut combo = sx.clone();
        for i in 0..combo.re.len() {
            combo.re[i] = a * sx.re[i] + b * sy.re[i];
            combo.im[i] = a * sx.im[i] + b * sy.im[i];
        }
        let ix = plan.inverse(&sx).unwrap();
        let iy = plan.inverse(&sy).unwrap();
        let ic = plan.inverse(&combo).unwrap();
        for i in 0..ic.len() {
            assert!((ic[i] - (a * ix[i] + b * iy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn operators_satisfy_the_adjoint_identity() {
        // <A x, y> == <x, A^T y> for both directions; this is exactly the
        // property backward relies on.
        let plan = default_plan();
        let fwd = stft_operator(&plan);
        let inv = istft_operator(&plan).unwrap();
        let n = 1024;
        let m = 64 * 66;
        let x = random_signal(n, 21);
        let y = random_signal(m, 22);
        let mut ax = vec![0.0; m];
        fwd.apply(&x, &mut ax);
        let mut aty = vec![0.0; n];
        fwd.adjoint(&y, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-10, "stft: {lhs} vs {rhs}");

        let u = random_signal(m, 23);
        let v = random_signal(n, 24);
        let mut bu = vec![0.0; n];
        inv.apply(&u, &mut bu);
        let mut btv = vec![0.0; m];
        inv.adjoint(&v, &mut btv);
        let lhs: f64 = bu.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&btv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-10, "istft: {lhs} vs {rhs}");
    }

    #[test]
    fn feature_layout_round_trips() {
        let plan = default_plan();
        let spec = plan.forward(&random_signal(1024, 31)).unwrap();
        let feat = spec.features();
        let back = Spectrogram::from_features(spec.frames, spec.bins, &feat).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        // hop does not divide window
        assert!(matches!(
            StftPlan::new(1024, StftConfig { window_len: 64, hop: 24, centered: true }),
            Err(SignalError::WindowHop { .. })
        ));
        // signal not a multiple of hop
        assert!(matches!(
            StftPlan::new(1000, StftConfig::default()),
            Err(SignalError::SignalLen { .. })
        ));
        // wrong input length at apply time
        let plan = default_plan();
        assert!(matches!(
            plan.forward(&vec![0.0; 100]),
            Err(SignalError::SegmentLen { expected: 1024, actual: 100 })
        ));
    }

    #[test]
    fn uncentered_hann_plan_is_not_invertible_at_the_edge() {
        // Without padding, sample 0 is covered only by window position 0,
        // whose Hann weight is zero.
        let plan = Arc::new(
            StftPlan::new(1024, StftConfig { window_len: 64, hop: 16, centered: false }).unwrap(),
        );
        assert!(matches!(
            istft_operator(&plan),
            Err(SignalError::NotInvertible { sample: 0 })
        ));
        // Analysis still works.
        assert_eq!(plan.frames, (1024 - 64) / 16 + 1);
        plan.forward(&vec![0.0; 1024]).unwrap();
    }
}
