//! Optimization: Adam with decoupled weight decay, cosine learning-rate
//! annealing, and the training loop.
//!
//! The loop is deliberately plain. Each step masks a fresh batch of PPG
//! segments (the mask seed is a pure function of the run seed, the epoch,
//! and the sample's dataset index, so runs replay bit-exactly), runs the
//! model forward, scores the reconstruction in both domains, backpropagates,
//! and applies one optimizer step. Validation after every epoch drives the
//! best-checkpoint selection; `last.ckpt` always mirrors the latest state.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::model::{
    dual_domain_loss, save_checkpoint, CheckpointError, Model, ModelError,
};
use crate::signal::{mask_samples, DataPair, Dataset, MaskConfig, SignalError, Split};
use crate::tensor::TensorError;
use crate::util::{mix, rng_from_seed};

/// Adam first-moment decay.
pub const BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const BETA2: f64 = 0.999;
/// Adam denominator fuzz.
pub const ADAM_EPS: f64 = 1e-8;
/// Mask ratio applied to the validation split (fixed, so the validation
/// score stays comparable across epochs and runs).
pub const VAL_MASK_RATIO: f64 = 0.1;
/// Training-log file name inside the run directory.
pub const LOG_FILE: &str = "train_log.csv";
/// Best-validation checkpoint file name.
pub const BEST_CKPT: &str = "best.ckpt";
/// Latest checkpoint file name.
pub const LAST_CKPT: &str = "last.ckpt";

// Seed-stream tags, so the shuffle, train-mask, and validation-mask streams
// never collide even though they branch from the same run seed.
const SHUFFLE_TAG: u64 = 0x5487;
const MASK_TAG: u64 = 0x3a5c;
const VAL_TAG: u64 = 0x7e1d;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid {field}: {reason}")]
    BadField { field: &'static str, reason: String },
    #[error("the {split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("schedule step {step} past total {total}")]
    StepPastEnd { step: u64, total: u64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything the training loop needs to know, deserializable from run
/// configuration files. Unknown keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate (the cosine schedule starts here).
    pub learning_rate: f64,
    /// Floor the cosine schedule decays to.
    pub lr_min: f64,
    /// Decoupled weight-decay coefficient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of each training input zeroed by the synthetic anomaly.
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 50,
            mask_ratio: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks every field, reporting the first violation.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: String| Err(TrainError::BadField { field, reason });
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_min.is_finite() && (0.0..=self.learning_rate).contains(&self.lr_min)) {
            return bad(
                "lr_min",
                format!("must lie in [0, learning_rate], got {}", self.lr_min),
            );
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", format!("must lie in [0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }

    /// Collects every violation instead of stopping at the first, for
    /// configuration-file diagnostics.
    #[must_use]
    pub fn violations(&self) -> Vec<String> {
        let mut probe = *self;
        let mut out = Vec::new();
        // Repair fields one at a time until validation passes, recording
        // each complaint along the way.
        loop {
            match probe.validate() {
                Ok(()) => break,
                Err(e) => {
                    out.push(e.to_string());
                    match e {
                        TrainError::BadField { field, .. } => match field {
                            "learning_rate" => probe.learning_rate = 1e-3,
                            "lr_min" => probe.lr_min = 0.0,
                            "weight_decay" => probe.weight_decay = 0.0,
                            "batch_size" => probe.batch_size = 1,
                            "mask_ratio" => probe.mask_ratio = 0.1,
                            _ => break,
                        },
                        _ => break,
                    }
                }
            }
        }
        out
    }
}

/// Half-cosine decay from `lr_max` (at step 0) to `lr_min` (at
/// `step == total`).
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if total == 0 {
        return Err(TrainError::EmptySchedule);
    }
    if step > total {
        return Err(TrainError::StepPastEnd { step, total });
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Adam moments, one slot per trainable tensor in declaration order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    #[must_use]
    pub fn for_model(model: &Model) -> Self {
        let mut m = Vec::new();
        model.params.visit(&mut |_, t| m.push(vec![0.0; model.graph.data(t).len()]));
        Self { step: 0, v: m.clone(), m }
    }
}

/// One Adam update on a single tensor's entries. `t` is the 1-based step
/// count (already incremented). Decoupled weight decay shrinks the
/// parameter *before* the moment-driven update is applied.
pub fn adam_update(
    data: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let bias1 = 1.0 - BETA1.powi(t as i32);
    let bias2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..data.len() {
        data[i] -= lr * weight_decay * data[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Applies one optimizer step to every trainable tensor from the gradients
/// currently on the tape. If any gradient entry anywhere is non-finite the
/// whole step is rejected — nothing moves, no moment updates — and the
/// offending tensor's name is returned so the caller can log it.
pub fn adam_step(
    model: &mut Model,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<Option<String>, TrainError> {
    let named = model.params.named();
    for (name, t) in &named {
        if let Some(grad) = model.graph.grad(*t) {
            if grad.iter().any(|g| !g.is_finite()) {
                return Ok(Some(name.clone()));
            }
        }
    }
    state.step += 1;
    for (slot, (_, t)) in named.iter().enumerate() {
        let grad = match model.graph.grad(*t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; model.graph.data(*t).len()],
        };
        let data = model.graph.leaf_data_mut(*t)?;
        adam_update(
            data,
            &grad,
            &mut state.m[slot],
            &mut state.v[slot],
            state.step,
            lr,
            weight_decay,
        );
    }
    Ok(None)
}

/// Scores the model on the validation split at the fixed validation mask
/// ratio, with masks derived from the run seed. Returns `None` when the
/// split is empty.
pub fn validation_report(
    model: &mut Model,
    val: &[&DataPair],
    run_seed: u64,
) -> Result<Option<MetricsReport>, TrainError> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut reports = evaluate(model, val, &[VAL_MASK_RATIO], mix(&[run_seed, VAL_TAG]))?;
    Ok(Some(reports.remove(0)))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Segment-weighted mean training loss over the epoch.
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
    pub val_prd: Option<f64>,
    pub val_fd: Option<f64>,
}

/// What [`fit`] leaves behind besides the files in the run directory.
#[derive(Debug)]
pub struct FitOutcome {
    pub records: Vec<EpochRecord>,
    pub best_val_rmse: Option<f64>,
    /// 1-based epoch of the best checkpoint.
    pub best_epoch: Option<usize>,
    /// Optimizer steps applied.
    pub steps: u64,
    /// Names of tensors whose non-finite gradients caused rejected steps.
    pub rejected_steps: Vec<String>,
    pub log_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the training log as CSV.
#[must_use]
pub fn log_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_rmse,val_prd,val_fd\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            opt(r.val_rmse),
            opt(r.val_prd),
            opt(r.val_fd),
        );
    }
    out
}

fn write_file(path: &Path, content: &str) -> Result<(), TrainError> {
    fs::write(path, content)
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}

/// Trains `model` on the dataset's train split and writes the run artifacts
/// into `out_dir`: `train_log.csv`, `last.ckpt` (every epoch), and
/// `best.ckpt` (lowest validation RMSE so far).
///
/// Normalization statistics are computed from the train split before the
/// first step. With `epochs == 0` the parameters are untouched and the log
/// holds only its header, but both checkpoints are still written so the
/// run directory is always complete. A non-finite loss aborts the run.
pub fn fit(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| TrainError::Io { path: out_dir.display().to_string(), source: e })?;

    let norm_pairs: Vec<(&[f64], &[f64])> =
        train.iter().map(|p| (p.ppg.samples(), p.abp.samples())).collect();
    model.norm = crate::model::NormStats::compute(&model.plan, &norm_pairs)?;

    let seg = model.config.signal_len;
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1) as u64;
    let mut state = AdamState::for_model(model);
    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut rejected: Vec<String> = Vec::new();
    let mut best: Option<(f64, usize)> = None;

    let log_path = out_dir.join(LOG_FILE);
    let best_path = out_dir.join(BEST_CKPT);
    let last_path = out_dir.join(LAST_CKPT);
    write_file(&log_path, &log_to_csv(&records))?;
    if config.epochs == 0 {
        save_checkpoint(&last_path, model, 0, None)?;
        save_checkpoint(&best_path, model, 0, None)?;
        return Ok(FitOutcome {
            records,
            best_val_rmse: None,
            best_epoch: None,
            steps: 0,
            rejected_steps: rejected,
            log_path,
            best_path,
            last_path,
        });
    }

    let mut global_step = 0u64;
    for epoch in 1..=config.epochs {
        let epoch_lr =
            cosine_lr(global_step, total_steps, config.learning_rate, config.lr_min)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from_seed(mix(&[config.seed, SHUFFLE_TAG, epoch as u64])));

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let lr = cosine_lr(global_step, total_steps, config.learning_rate, config.lr_min)?;
            let mut masked = Vec::with_capacity(chunk.len() * seg);
            let mut abp = Vec::with_capacity(chunk.len() * seg);
            let mut u_ref_data = Vec::new();
            for &idx in chunk {
                let pair = train[idx];
                let cfg = MaskConfig {
                    ratio: config.mask_ratio,
                    seed: mix(&[config.seed, MASK_TAG, epoch as u64, idx as u64]),
                };
                masked.extend(mask_samples(pair.ppg.samples(), &cfg)?);
                abp.extend_from_slice(pair.abp.samples());
                u_ref_data.extend(model.plan.forward(pair.abp.samples())?.features());
            }

            model.reset_tape();
            let out = model.forward(&masked)?;
            let [frames, feat] = model.plan.feature_shape();
            let x_ref = model.graph.constant(abp, &[chunk.len(), seg])?;
            let u_ref = model.graph.constant(u_ref_data, &[chunk.len(), frames, feat])?;
            let mut loss = dual_domain_loss(&mut model.graph, out.x_hat, x_ref, out.u_hat, u_ref)?;
            if let Some(aux) = out.aux_loss {
                loss = model.graph.add(loss, aux)?;
            }
            let loss_val = model.graph.value(loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            loss_sum += loss_val * chunk.len() as f64;

            model.graph.clear_grads();
            model.graph.backward(loss)?;
            if let Some(name) = adam_step(model, &mut state, lr, config.weight_decay)? {
                rejected.push(name);
            }
            global_step += 1;
        }

        let report = validation_report(model, &val, config.seed)?;
        let val_rmse = report.as_ref().map(|r| r.rmse.mean);
        records.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / train.len() as f64,
            val_rmse,
            val_prd: report.as_ref().map(|r| r.prd.mean),
            val_fd: report.as_ref().map(|r| r.fd.mean),
        });
        write_file(&log_path, &log_to_csv(&records))?;

        save_checkpoint(&last_path, model, global_step, val_rmse)?;
        let improved = match (val_rmse, best) {
            (Some(v), Some((b, _))) => v < b,
            (Some(_), None) => true,
            // Without a validation split, the latest state is the best.
            (None, _) => true,
        };
        if improved {
            best = val_rmse.map(|v| (v, epoch)).or(Some((f64::NAN, epoch)));
            save_checkpoint(&best_path, model, global_step, val_rmse)?;
        }
    }

    let (best_val_rmse, best_epoch) = match best {
        Some((v, e)) if v.is_finite() => (Some(v), Some(e)),
        Some((_, e)) => (None, Some(e)),
        None => (None, None),
    };
    Ok(FitOutcome {
        records,
        best_val_rmse,
        best_epoch,
        steps: global_step,
        rejected_steps: rejected,
        log_path,
        best_path,
        last_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_checkpoint, Mode, ModelConfig};
    use crate::signal::{synth_pair, SynthParams};
    use tempfile::TempDir;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            stages: 2,
            attn_heads: 1,
            mlp_ratio: 1,
            codebook_size: 8,
            msek_heads: 2,
            seed,
            ..Default::default()
        }
    }

    fn tiny_dataset(n_train: usize, n_val: usize) -> Dataset {
        let params = SynthParams::default();
        let mut pairs = Vec::new();
        for i in 0..n_train + n_val {
            let id = format!("p{i}");
            let (ppg, abp, truth) = synth_pair(&id, i as u64, &params).unwrap();
            let split = if i < n_train { Split::Train } else { Split::Val };
            pairs.push(DataPair { id, ppg, abp, split, truth: Some(truth) });
        }
        Dataset { pairs }
    }

    #[test]
    fn config_validation_flags_each_field() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            lr_min: -1.0,
            weight_decay: f64::NAN,
            batch_size: 0,
            mask_ratio: 1.0,
            ..Default::default()
        };
        let violations = bad.violations();
        assert_eq!(violations.len(), 5, "{violations:?}");
        for field in ["learning_rate", "lr_min", "weight_decay", "batch_size", "mask_ratio"] {
            assert!(violations.iter().any(|v| v.contains(field)), "missing {field}");
        }
        // lr_min above learning_rate is also rejected.
        let c = TrainConfig { lr_min: 2e-3, ..Default::default() };
        assert!(matches!(c.validate(), Err(TrainError::BadField { field: "lr_min", .. })));
    }

    #[test]
    fn cosine_schedule_hits_endpoints_and_midpoint() {
        let (hi, lo) = (1e-3, 1e-5);
        assert_eq!(cosine_lr(0, 100, hi, lo).unwrap(), hi);
        assert!((cosine_lr(100, 100, hi, lo).unwrap() - lo).abs() < 1e-18);
        let mid = cosine_lr(50, 100, hi, lo).unwrap();
        assert!((mid - 0.5 * (hi + lo)).abs() < 1e-18);
        // Monotone non-increasing across the whole schedule.
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, hi, lo).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        assert!(matches!(cosine_lr(0, 0, hi, lo), Err(TrainError::EmptySchedule)));
        assert!(matches!(cosine_lr(5, 4, hi, lo), Err(TrainError::StepPastEnd { .. })));
    }

    #[test]
    fn first_adam_step_moves_by_the_bias_corrected_unit() {
        // With gradient exactly 1 the bias-corrected moments are both 1,
        // so the very first update is -lr / (1 + eps).
        let mut data = [0.5];
        let mut m = [0.0];
        let mut v = [0.0];
        adam_update(&mut data, &[1.0], &mut m, &mut v, 1, 1e-3, 0.0);
        let expected = 0.5 - 1e-3 / (1.0 + ADAM_EPS);
        assert!((data[0] - expected).abs() < 1e-15, "{} vs {expected}", data[0]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut data = [0.7, -0.3];
        let before = data;
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for t in 1..=5 {
            adam_update(&mut data, &[0.0, 0.0], &mut m, &mut v, t, 1e-3, 0.0);
        }
        assert_eq!(data, before);
    }

    #[test]
    fn weight_decay_shrinks_before_the_moment_update() {
        // theta <- theta - lr*wd*theta, then the gradient part (which does
        // not depend on theta) is subtracted. With g = 1 the first step
        // from theta0 = 2 at lr = 0.5, wd = 0.1 lands exactly on
        // 2 - 0.5*0.1*2 - 0.5/(1+eps).
        let mut data = [2.0];
        let mut m = [0.0];
        let mut v = [0.0];
        adam_update(&mut data, &[1.0], &mut m, &mut v, 1, 0.5, 0.1);
        let expected = 2.0 - 0.5 * 0.1 * 2.0 - 0.5 / (1.0 + ADAM_EPS);
        assert!((data[0] - expected).abs() < 1e-15, "{} vs {expected}", data[0]);
    }

    #[test]
    fn identical_parameters_receive_identical_updates() {
        let grad = [0.3, -1.2, 0.05];
        let mut a = [0.1, 0.2, 0.3];
        let mut b = a;
        let (mut ma, mut va) = ([0.0; 3], [0.0; 3]);
        let (mut mb, mut vb) = ([0.0; 3], [0.0; 3]);
        for t in 1..=3 {
            adam_update(&mut a, &grad, &mut ma, &mut va, t, 1e-3, 1e-5);
            adam_update(&mut b, &grad, &mut mb, &mut vb, t, 1e-3, 1e-5);
        }
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(va, vb);
    }

    #[test]
    fn non_finite_gradient_rejects_the_whole_step() {
        let mut model = Model::new(small_config(7), Mode::CamOnly).unwrap();
        let named = model.params.named();
        let before: Vec<Vec<f64>> =
            named.iter().map(|(_, t)| model.graph.data(*t).to_vec()).collect();

        // Drive an overflow into one parameter's gradient while the others
        // stay finite: loss = mean(w * 1e200 * 1e200) has d/dw = 1e400.
        let (name0, w) = named[0].clone();
        let shape = model.graph.shape(w).to_vec();
        let len: usize = shape.iter().product();
        let big1 = model.graph.constant(vec![1e200; len], &shape).unwrap();
        let big2 = model.graph.constant(vec![1e200; len], &shape).unwrap();
        let p1 = model.graph.mul(w, big1).unwrap();
        let p2 = model.graph.mul(p1, big2).unwrap();
        let loss = model.graph.mean(p2);
        model.graph.clear_grads();
        model.graph.backward(loss).unwrap();

        let mut state = AdamState::for_model(&model);
        let rejected = adam_step(&mut model, &mut state, 1e-3, 0.0).unwrap();
        assert_eq!(rejected.as_deref(), Some(name0.as_str()));
        assert_eq!(state.step, 0, "rejected step must not advance the counter");
        for (slot, (_, t)) in model.params.named().iter().enumerate() {
            assert_eq!(model.graph.data(*t), before[slot].as_slice(), "parameter moved");
            assert!(state.m[slot].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fit_rejects_empty_train_split_and_bad_config() {
        let mut model = Model::new(small_config(1), Mode::CamOnly).unwrap();
        let dir = TempDir::new().unwrap();
        let empty = Dataset { pairs: Vec::new() };
        let err = fit(&mut model, &empty, &TrainConfig::default(), dir.path()).unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit { split: "train" }));

        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        let data = tiny_dataset(2, 0);
        let err = fit(&mut model, &data, &bad, dir.path()).unwrap_err();
        assert!(matches!(err, TrainError::BadField { field: "batch_size", .. }));
    }

    #[test]
    fn zero_epochs_changes_nothing_and_logs_only_the_header() {
        let mut model = Model::new(small_config(2), Mode::CamMsek).unwrap();
        let before: Vec<Vec<f64>> =
            model.params.named().iter().map(|(_, t)| model.graph.data(*t).to_vec()).collect();
        let data = tiny_dataset(3, 1);
        let dir = TempDir::new().unwrap();
        let config = TrainConfig { epochs: 0, batch_size: 2, ..Default::default() };
        let outcome = fit(&mut model, &data, &config, dir.path()).unwrap();
        assert_eq!(outcome.steps, 0);
        assert!(outcome.records.is_empty());
        for (slot, (_, t)) in model.params.named().iter().enumerate() {
            assert_eq!(model.graph.data(*t), before[slot].as_slice());
        }
        let log = fs::read_to_string(outcome.log_path).unwrap();
        assert_eq!(log, "epoch,lr,train_loss,val_rmse,val_prd,val_fd\n");
        // Both checkpoints exist and hold the untouched parameters.
        let (restored, step, val) = load_checkpoint(&outcome.best_path).unwrap();
        assert_eq!(step, 0);
        assert!(val.is_none());
        for (slot, (_, t)) in restored.params.named().iter().enumerate() {
            assert_eq!(restored.graph.data(*t), before[slot].as_slice());
        }
        assert!(outcome.last_path.exists());
    }

    #[test]
    fn gradient_reaches_every_parameter_group_in_one_epoch() {
        // Full mode so the codebook (via soft attention) and the channel
        // heads are all on the path; wd = 0 so any movement is gradient.
        let mut model = Model::new(small_config(3), Mode::CamMsek).unwrap();
        let before: Vec<Vec<f64>> =
            model.params.named().iter().map(|(_, t)| model.graph.data(*t).to_vec()).collect();
        let data = tiny_dataset(2, 0);
        let dir = TempDir::new().unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let outcome = fit(&mut model, &data, &config, dir.path()).unwrap();
        assert_eq!(outcome.steps, 1);
        assert!(outcome.rejected_steps.is_empty());
        for (slot, (name, t)) in model.params.named().iter().enumerate() {
            let after = model.graph.data(*t);
            assert!(
                after.iter().zip(&before[slot]).any(|(a, b)| a != b),
                "no gradient reached {name}"
            );
        }
    }

    #[test]
    fn training_runs_are_bit_identical() {
        let data = tiny_dataset(4, 2);
        let config = TrainConfig { epochs: 2, batch_size: 2, seed: 11, ..Default::default() };
        let run = |dir: &Path| {
            let mut model = Model::new(small_config(5), Mode::CamOnly).unwrap();
            fit(&mut model, &data, &config, dir).unwrap();
            (
                fs::read_to_string(dir.join(LOG_FILE)).unwrap(),
                fs::read(dir.join(BEST_CKPT)).unwrap(),
                fs::read(dir.join(LAST_CKPT)).unwrap(),
            )
        };
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let (log1, best1, last1) = run(d1.path());
        let (log2, best2, last2) = run(d2.path());
        assert_eq!(log1, log2);
        assert_eq!(best1, best2);
        assert_eq!(last1, last2);
        // And the log carries one row per epoch with a non-increasing lr.
        let lines: Vec<&str> = log1.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        let lrs: Vec<f64> =
            lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "lr increased: {lrs:?}");
    }

    #[test]
    fn best_checkpoint_reproduces_its_logged_validation_score() {
        let data = tiny_dataset(3, 2);
        let config = TrainConfig { epochs: 2, batch_size: 3, seed: 13, ..Default::default() };
        let dir = TempDir::new().unwrap();
        let mut model = Model::new(small_config(6), Mode::CamMsek).unwrap();
        let outcome = fit(&mut model, &data, &config, dir.path()).unwrap();
        let logged_best = outcome.best_val_rmse.unwrap();
        let best_epoch = outcome.best_epoch.unwrap();
        assert!(outcome
            .records
            .iter()
            .all(|r| r.val_rmse.unwrap() >= logged_best - 1e-18));
        assert_eq!(outcome.records[best_epoch - 1].val_rmse.unwrap(), logged_best);

        let (mut restored, _, stored_rmse) = load_checkpoint(&outcome.best_path).unwrap();
        assert_eq!(stored_rmse.unwrap(), logged_best);
        let val = data.split(Split::Val);
        let report = validation_report(&mut restored, &val, config.seed).unwrap().unwrap();
        assert!(
            (report.rmse.mean - logged_best).abs() < 1e-12,
            "recomputed {} vs logged {logged_best}",
            report.rmse.mean
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_the_batch_position() {
        let mut model = Model::new(small_config(8), Mode::CamOnly).unwrap();
        let (_, w) = model.params.named()[0].clone();
        model.graph.leaf_data_mut(w).unwrap()[0] = f64::NAN;
        let data = tiny_dataset(2, 0);
        let dir = TempDir::new().unwrap();
        let config = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
        let err = fit(&mut model, &data, &config, dir.path()).unwrap_err();
        assert!(
            matches!(err, TrainError::NonFiniteLoss { epoch: 1, batch: 0 }),
            "got {err:?}"
        );
    }

    #[test]
    fn one_epoch_of_training_lowers_the_training_loss() {
        let data = tiny_dataset(4, 0);
        let config = TrainConfig { epochs: 4, batch_size: 4, seed: 3, ..Default::default() };
        let dir = TempDir::new().unwrap();
        let mut model = Model::new(small_config(9), Mode::CamOnly).unwrap();
        let outcome = fit(&mut model, &data, &config, dir.path()).unwrap();
        let first = outcome.records.first().unwrap().train_loss;
        let last = outcome.records.last().unwrap().train_loss;
        assert!(last < first, "loss did not drop: {first} -> {last}");
        assert!(model.graph.data(model.params.codebook).iter().all(|v| v.is_finite()));
    }
}
