//! The latent codebook and its two lookup schemes.
//!
//! The codebook is a trainable `m x d` matrix. The correlation-boosted
//! lookup ([`cam_attend`]) queries it with soft cross-attention — every
//! output token is a convex combination of all basis rows, so gradients
//! flow into both the tokens and the codebook with no stop-gradient and no
//! auxiliary loss. The baseline lookup ([`nn_quantize`]) is hard
//! nearest-neighbor vector quantization with a straight-through estimator
//! and the conventional codebook + commitment auxiliary loss.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError};
use crate::util::rng_from_seed;

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("codebook sizes must be positive, got m={m}, d={d}")]
    EmptyCodebook { m: usize, d: usize },
    #[error("token dimension {token_dim} does not match codebook dimension {codebook_dim}")]
    DimMismatch { token_dim: usize, codebook_dim: usize },
    #[error("codebook must be a 2-D matrix, got shape {shape:?}")]
    NotAMatrix { shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Creates a trainable `m x d` codebook leaf with entries i.i.d. uniform in
/// `[-1/sqrt(d), 1/sqrt(d)]`. Deterministic given `seed`.
pub fn init_codebook(
    g: &mut Graph,
    m: usize,
    d: usize,
    seed: u64,
) -> Result<Tensor, QuantizeError> {
    if m == 0 || d == 0 {
        return Err(QuantizeError::EmptyCodebook { m, d });
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..m * d).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(g.leaf(data, &[m, d], true)?)
}

/// Validates that `codebook` is `m x d` and the last dim of `z` equals `d`;
/// returns `(m, d)`.
fn check_dims(g: &Graph, z: Tensor, codebook: Tensor) -> Result<(usize, usize), QuantizeError> {
    let cs = g.shape(codebook);
    if cs.len() != 2 {
        return Err(QuantizeError::NotAMatrix { shape: cs.to_vec() });
    }
    let (m, d) = (cs[0], cs[1]);
    let token_dim = *g.shape(z).last().unwrap_or(&0);
    if token_dim != d {
        return Err(QuantizeError::DimMismatch { token_dim, codebook_dim: d });
    }
    Ok((m, d))
}

/// Soft codebook lookup: `softmax(z M^T / sqrt(d)) M`, rows attended per
/// token. Fully differentiable into both `z` and the codebook.
pub fn cam_attend(g: &mut Graph, z: Tensor, codebook: Tensor) -> Result<Tensor, QuantizeError> {
    let (_m, d) = check_dims(g, z, codebook)?;
    let keys = g.transpose_last2(codebook)?; // (d, m)
    let scores = g.matmul(z, keys)?; // (..., m), shared 2-D rhs
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_lastdim(scaled)?;
    Ok(g.matmul(attn, codebook)?)
}

/// Result of hard nearest-neighbor quantization.
pub struct NnQuantized {
    /// Quantized tokens, same shape as the input; forward value is the
    /// nearest basis row, gradient passes straight through to the input.
    pub z_v: Tensor,
    /// Chosen basis row per token, in row-major token order.
    pub indices: Vec<usize>,
    /// Codebook + commitment auxiliary loss (scalar, mean over entries).
    pub aux_loss: Tensor,
}

/// Hard codebook lookup: each token maps to its Euclidean-nearest basis row
/// (ties break toward the lowest index). The output carries a
/// straight-through gradient to `z`; the codebook trains only through
/// `aux_loss = msq(sg(z) - z_near) + beta * msq(z - sg(z_near))` where
/// `msq` is the mean of squared entries and `sg` stops gradients.
pub fn nn_quantize(
    g: &mut Graph,
    z: Tensor,
    codebook: Tensor,
    beta: f64,
) -> Result<NnQuantized, QuantizeError> {
    let (m, d) = check_dims(g, z, codebook)?;
    let z_shape = g.shape(z).to_vec();
    let tokens = g.data(z).len() / d;

    // Nearest rows via the expansion |z - c|^2 = |z|^2 - 2 z.c + |c|^2; the
    // |z|^2 term is constant per token and dropped from the comparison.
    let code = g.data(codebook);
    let row_sq: Vec<f64> = (0..m)
        .map(|r| code[r * d..(r + 1) * d].iter().map(|v| v * v).sum())
        .collect();
    let zdata = g.data(z);
    let mut indices = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let zt = &zdata[t * d..(t + 1) * d];
        let mut best = (0usize, f64::INFINITY);
        for r in 0..m {
            let dot: f64 = zt.iter().zip(&code[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum();
            let score = row_sq[r] - 2.0 * dot;
            if score < best.1 {
                best = (r, score);
            }
        }
        indices.push(best.0);
    }

    let gathered = g.gather_rows(codebook, Arc::new(indices.clone()))?; // (tokens, d)
    let z_near = g.reshape(gathered, &z_shape)?;

    // Straight-through: value equals z_near, gradient flows only into z.
    let jump = g.sub(z_near, z)?;
    let jump_sg = g.detach(jump);
    let z_v = g.add(z, jump_sg)?;

    // Codebook term (differentiable into the codebook rows) plus the
    // beta-weighted commitment term (differentiable into z).
    let z_sg = g.detach(z);
    let code_diff = g.sub(z_sg, z_near)?;
    let code_sq = g.mul(code_diff, code_diff)?;
    let code_term = g.mean(code_sq);
    let near_sg = g.detach(z_near);
    let commit_diff = g.sub(z, near_sg)?;
    let commit_sq = g.mul(commit_diff, commit_diff)?;
    let commit_term = g.mean(commit_sq);
    let commit_scaled = g.scale(commit_term, beta);
    let aux_loss = g.add(code_term, commit_scaled)?;

    Ok(NnQuantized { z_v, indices, aux_loss })
}
