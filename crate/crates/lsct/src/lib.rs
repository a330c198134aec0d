//! Conversion of anomalous (masked) photoplethysmography waveforms into
//! arterial blood pressure waveforms with a latent-space constraint
//! transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — reverse-mode automatic differentiation over dense `f64`
//!   tensors; everything trainable runs on this engine.
//! * [`signal`] — synthetic paired-waveform generation, contiguous-block
//!   masking, the short-time Fourier transform and its inverse, and segment /
//!   manifest file I/O.
//! * [`quantize`] — the learned codebook together with the cross-attention
//!   lookup (CAM) and the classic nearest-neighbour vector-quantization
//!   baseline.
//! * [`msek`] — multi-head attention over a fixed random channel graph
//!   (MSEK), the latent enhancement stage.
//! * [`model`] — encoder, decoder, full model assembly, the dual-domain
//!   loss, and checkpoint I/O.
//! * [`train`] — Adam with decoupled weight decay, cosine learning-rate
//!   annealing, and the training loop.
//! * [`metrics`] — RMSE / PRD / discrete Fréchet distance, SBP/DBP
//!   extraction, and the evaluation driver.

pub mod metrics;
pub mod model;
pub mod msek;
pub mod quantize;
pub mod signal;
pub mod tensor;
pub mod train;
pub mod util;
