//! The full waveform-conversion model.
//!
//! Pipeline: time-domain input -> short-time spectrogram -> per-frame
//! token embedding + learned positions -> pre-norm transformer stages with
//! token merging (halve length, double channels) down to an `n x d`
//! bottleneck -> soft or hard codebook lookup -> optional channel-graph
//! enhancement -> decoder input `z_g + z_q` (skip connection) -> mirrored
//! transformer stages with upsampling -> spectrogram features -> inverse
//! transform back to the time domain. Training minimizes mean-squared
//! error in both domains, equally weighted.

mod ckpt;

pub use ckpt::{load_checkpoint, save_checkpoint, CheckpointError};

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msek::{msek_forward, ChannelGraph, MsekError, MsekParams};
use crate::quantize::{cam_attend, init_codebook, nn_quantize, QuantizeError};
use crate::signal::{istft_operator, stft_operator, SignalError, StftConfig, StftPlan};
use crate::tensor::{Graph, LinearOperator, Tensor, TensorError};
use crate::util::{mix, rng_from_seed};

/// Commitment weight for the hard-quantization auxiliary loss.
pub const VQ_COMMITMENT_BETA: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{frames} frames cannot be halved {downsamples} times")]
    FrameSplit { frames: usize, downsamples: usize },
    #[error("stage {stage} has {channels} channels, not divisible by {heads} attention heads")]
    HeadSplit { stage: usize, channels: usize, heads: usize },
    #[error("{field} must be at least 1")]
    ZeroField { field: &'static str },
    #[error("batch of {actual} samples is not a positive multiple of segment length {segment}")]
    BatchLen { actual: usize, segment: usize },
    #[error("bottleneck input is {got:?}, expected (batch, {n}, {d})")]
    BottleneckShape { got: Vec<usize>, n: usize, d: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Msek(#[from] MsekError),
}

/// Which lookup and enhancement paths run in [`Model::forward`]; the four
/// variants are the rows of the module-ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Soft codebook lookup plus channel-graph enhancement (the full model).
    CamMsek,
    CamOnly,
    MsekOnly,
    /// Hard nearest-neighbor quantization, no enhancement.
    NnBaseline,
}

impl Mode {
    #[must_use]
    pub fn uses_cam(self) -> bool {
        matches!(self, Mode::CamMsek | Mode::CamOnly)
    }

    #[must_use]
    pub fn uses_msek(self) -> bool {
        matches!(self, Mode::CamMsek | Mode::MsekOnly)
    }

    pub const ALL: [Mode; 4] = [Mode::CamMsek, Mode::CamOnly, Mode::MsekOnly, Mode::NnBaseline];
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Mode::CamMsek => "cam-msek",
            Mode::CamOnly => "cam-only",
            Mode::MsekOnly => "msek-only",
            Mode::NnBaseline => "nn-baseline",
        };
        f.write_str(name)
    }
}

/// Hyper-parameters. Everything downstream (frame counts, channel
/// schedule, bottleneck size) is derived from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub signal_len: usize,
    pub stft: StftConfig,
    /// Channels after the token embedding; doubled at each merge.
    pub base_channels: usize,
    /// Transformer stages; `stages - 1` merges/upsamples sit between them.
    pub stages: usize,
    pub attn_heads: usize,
    /// Hidden width of each block's MLP, as a multiple of its channels.
    pub mlp_ratio: usize,
    /// Codebook rows `m`.
    pub codebook_size: usize,
    /// Channel-graph attention heads `K`.
    pub msek_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            signal_len: crate::signal::SEGMENT_LEN,
            stft: StftConfig::default(),
            base_channels: 8,
            stages: 4,
            attn_heads: 2,
            mlp_ratio: 2,
            codebook_size: 128,
            msek_heads: 8,
            seed: 0,
        }
    }
}

/// Shapes derived from a validated [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub frames: usize,
    pub bins: usize,
    /// Features per frame: real plus imaginary planes, `2 * bins`.
    pub feat: usize,
    /// Latent channel count at the bottleneck (equals the codebook dim).
    pub d: usize,
    /// Bottleneck token count: `frames / 2^(stages-1)`.
    pub n: usize,
    /// Encoder channel schedule, `base_channels * 2^s` per stage.
    pub channels: Vec<usize>,
}

impl ModelConfig {
    /// Validates every structural constraint and returns the derived
    /// shapes. Builds the transform plan to learn the frame count.
    pub fn dims(&self) -> Result<ModelDims, ModelError> {
        for (value, field) in [
            (self.signal_len, "signal_len"),
            (self.base_channels, "base_channels"),
            (self.stages, "stages"),
            (self.attn_heads, "attn_heads"),
            (self.mlp_ratio, "mlp_ratio"),
            (self.codebook_size, "codebook_size"),
            (self.msek_heads, "msek_heads"),
        ] {
            if value == 0 {
                return Err(ModelError::ZeroField { field });
            }
        }
        let plan = StftPlan::new(self.signal_len, self.stft)?;
        let frames = plan.frames;
        let bins = plan.bins;
        let downsamples = self.stages - 1;
        if frames % (1 << downsamples) != 0 || frames >> downsamples == 0 {
            return Err(ModelError::FrameSplit { frames, downsamples });
        }
        let channels: Vec<usize> = (0..self.stages).map(|s| self.base_channels << s).collect();
        for (stage, &c) in channels.iter().enumerate() {
            if c % self.attn_heads != 0 {
                return Err(ModelError::HeadSplit { stage, channels: c, heads: self.attn_heads });
            }
        }
        Ok(ModelDims {
            frames,
            bins,
            feat: 2 * bins,
            d: self.base_channels << downsamples,
            n: frames >> downsamples,
            channels,
        })
    }

    /// Total trainable scalar count, as a closed-form function of the
    /// configuration: with `lin(i,o) = i*o + o` and per-stage channels
    /// `c_s = base * 2^s`, a block at width `c` costs
    /// `4c [norms] + 4*lin(c,c) [attention] + lin(c,rc) + lin(rc,c) [mlp]`;
    /// the encoder adds `lin(2B,c_0) + F*c_0 [embed+positions]` and a
    /// `lin(2c_s, 2c_s)` merge below each of the first `stages-1` stages;
    /// the decoder mirrors the blocks, spends `lin(c_s, c_s)` per upsample
    /// for `s > 0`, and ends with `lin(c_0, 2B)`; the codebook adds `m*d`
    /// and the channel-graph heads `K*n^2`.
    pub fn param_count(&self) -> Result<usize, ModelError> {
        let dims = self.dims()?;
        let lin = |i: usize, o: usize| i * o + o;
        let block = |c: usize| 4 * c + 4 * lin(c, c) + lin(c, self.mlp_ratio * c) + lin(self.mlp_ratio * c, c);
        let mut total = lin(dims.feat, self.base_channels) + dims.frames * self.base_channels;
        for (s, &c) in dims.channels.iter().enumerate() {
            total += block(c);
            if s + 1 < self.stages {
                total += lin(2 * c, 2 * c);
            }
        }
        for (s, &c) in dims.channels.iter().enumerate().rev() {
            total += block(c);
            if s > 0 {
                total += lin(c, c);
            }
        }
        total += lin(self.base_channels, dims.feat);
        total += self.codebook_size * dims.d;
        total += self.msek_heads * dims.n * dims.n;
        Ok(total)
    }
}

/// A weight matrix (`d_in x d_out`) with its bias.
pub struct LinearP {
    pub w: Tensor,
    pub b: Tensor,
}

/// One pre-norm transformer block: multi-head self-attention plus an MLP,
/// each behind a residual connection.
pub struct BlockP {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub proj: LinearP,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1: LinearP,
    pub fc2: LinearP,
}

pub struct EncoderP {
    pub embed: LinearP,
    pub pos: Tensor,
    pub blocks: Vec<BlockP>,
    pub merges: Vec<LinearP>,
}

pub struct DecoderP {
    pub blocks: Vec<BlockP>,
    pub ups: Vec<LinearP>,
    pub out: LinearP,
}

pub struct ModelParams {
    pub encoder: EncoderP,
    pub decoder: DecoderP,
    pub codebook: Tensor,
    pub msek: MsekParams,
}

impl ModelParams {
    /// Enumerates every trainable tensor in the fixed serialization order.
    /// Checkpoints, optimizer state, and parameter counting all key off
    /// this order, so it must never change silently.
    pub fn visit(&self, f: &mut impl FnMut(&str, Tensor)) {
        let linear = |f: &mut dyn FnMut(&str, Tensor), prefix: &str, l: &LinearP| {
            f(&format!("{prefix}.w"), l.w);
            f(&format!("{prefix}.b"), l.b);
        };
        let block = |f: &mut dyn FnMut(&str, Tensor), prefix: &str, b: &BlockP| {
            f(&format!("{prefix}.ln1.gamma"), b.ln1_gamma);
            f(&format!("{prefix}.ln1.beta"), b.ln1_beta);
            linear(f, &format!("{prefix}.attn.q"), &b.q);
            linear(f, &format!("{prefix}.attn.k"), &b.k);
            linear(f, &format!("{prefix}.attn.v"), &b.v);
            linear(f, &format!("{prefix}.attn.proj"), &b.proj);
            f(&format!("{prefix}.ln2.gamma"), b.ln2_gamma);
            f(&format!("{prefix}.ln2.beta"), b.ln2_beta);
            linear(f, &format!("{prefix}.mlp.fc1"), &b.fc1);
            linear(f, &format!("{prefix}.mlp.fc2"), &b.fc2);
        };
        linear(f, "encoder.embed", &self.encoder.embed);
        f("encoder.pos", self.encoder.pos);
        for (s, blk) in self.encoder.blocks.iter().enumerate() {
            block(f, &format!("encoder.stage{s}"), blk);
            if let Some(m) = self.encoder.merges.get(s) {
                linear(f, &format!("encoder.merge{s}"), m);
            }
        }
        for (s, blk) in self.decoder.blocks.iter().enumerate() {
            block(f, &format!("decoder.stage{s}"), blk);
            if let Some(u) = self.decoder.ups.get(s) {
                linear(f, &format!("decoder.up{s}"), u);
            }
        }
        linear(f, "decoder.out", &self.decoder.out);
        f("codebook", self.codebook);
        for (k, &w) in self.msek.heads.iter().enumerate() {
            f(&format!("msek.head{k}"), w);
        }
    }

    /// `(name, tensor)` pairs in visit order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

/// Scalar z-score statistics for the two signal kinds, computed over every
/// spectrogram feature entry of a training split. Applied to the encoder
/// input and inverted at the decoder output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub ppg_mean: f64,
    pub ppg_std: f64,
    pub abp_mean: f64,
    pub abp_std: f64,
}

impl NormStats {
    /// No-op statistics (mean 0, unit spread).
    #[must_use]
    pub fn identity() -> Self {
        Self { ppg_mean: 0.0, ppg_std: 1.0, abp_mean: 0.0, abp_std: 1.0 }
    }

    /// Computes statistics from `(ppg_samples, abp_samples)` pairs. The
    /// spread is floored at 1e-8 so degenerate inputs stay invertible.
    pub fn compute(plan: &StftPlan, pairs: &[(&[f64], &[f64])]) -> Result<Self, SignalError> {
        let mut stats = [(0.0f64, 0.0f64, 0u64); 2]; // (sum, sum_sq, count)
        for &(ppg, abp) in pairs {
            for (slot, samples) in [(0, ppg), (1, abp)] {
                let feat = plan.forward(samples)?.features();
                let s = &mut stats[slot];
                for v in feat {
                    s.0 += v;
                    s.1 += v * v;
                    s.2 += 1;
                }
            }
        }
        let finish = |(sum, sum_sq, count): (f64, f64, u64)| {
            let n = (count as f64).max(1.0);
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            (mean, var.sqrt().max(1e-8))
        };
        let (ppg_mean, ppg_std) = finish(stats[0]);
        let (abp_mean, abp_std) = finish(stats[1]);
        Ok(Self { ppg_mean, ppg_std, abp_mean, abp_std })
    }
}

/// Everything the forward pass produces, as handles into the model's tape.
pub struct ForwardOut {
    /// Predicted spectrogram features, `(batch, frames, 2*bins)`.
    pub u_hat: Tensor,
    /// Predicted time-domain signal, `(batch, signal_len)`.
    pub x_hat: Tensor,
    pub z_q: Tensor,
    pub z_v: Tensor,
    pub z_g: Tensor,
    /// The decoder's input, `z_g + z_q`.
    pub dec_in: Tensor,
    /// Hard-quantization auxiliary loss, present in the modes that use it.
    pub aux_loss: Option<Tensor>,
}

/// A model instance: the tape holding its parameter leaves, the handles
/// into it, the frozen channel graph, normalization statistics, and the
/// transform plan.
pub struct Model {
    pub config: ModelConfig,
    pub mode: Mode,
    pub graph: Graph,
    pub params: ModelParams,
    pub channel_graph: ChannelGraph,
    pub norm: NormStats,
    pub plan: Arc<StftPlan>,
    dims: ModelDims,
    stft_op: Arc<dyn LinearOperator>,
    istft_op: Arc<dyn LinearOperator>,
    /// Tape length right after parameter creation; `reset_tape` truncates
    /// back to this point.
    base_nodes: usize,
}

fn init_linear(
    g: &mut Graph,
    rng: &mut ChaCha8Rng,
    d_in: usize,
    d_out: usize,
) -> Result<LinearP, TensorError> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(LinearP {
        w: g.leaf(w, &[d_in, d_out], true)?,
        b: g.leaf(vec![0.0; d_out], &[d_out], true)?,
    })
}

fn init_block(
    g: &mut Graph,
    rng: &mut ChaCha8Rng,
    c: usize,
    mlp_ratio: usize,
) -> Result<BlockP, TensorError> {
    Ok(BlockP {
        ln1_gamma: g.leaf(vec![1.0; c], &[c], true)?,
        ln1_beta: g.leaf(vec![0.0; c], &[c], true)?,
        q: init_linear(g, rng, c, c)?,
        k: init_linear(g, rng, c, c)?,
        v: init_linear(g, rng, c, c)?,
        proj: init_linear(g, rng, c, c)?,
        ln2_gamma: g.leaf(vec![1.0; c], &[c], true)?,
        ln2_beta: g.leaf(vec![0.0; c], &[c], true)?,
        fc1: init_linear(g, rng, c, mlp_ratio * c)?,
        fc2: init_linear(g, rng, mlp_ratio * c, c)?,
    })
}

fn block_forward(
    g: &mut Graph,
    p: &BlockP,
    x: Tensor,
    heads: usize,
) -> Result<Tensor, TensorError> {
    let c = *g.shape(x).last().unwrap();
    let head_dim = c / heads;
    let ln1 = g.layer_norm_lastdim(x, p.ln1_gamma, p.ln1_beta)?;
    let q = g.linear(ln1, p.q.w, p.q.b)?;
    let k = g.linear(ln1, p.k.w, p.k.b)?;
    let v = g.linear(ln1, p.v.w, p.v.b)?;
    let qh = g.split_lastdim(q, heads)?;
    let kh = g.split_lastdim(k, heads)?;
    let vh = g.split_lastdim(v, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let kt = g.transpose_last2(kh[h])?;
        let scores = g.batched_matmul(qh[h], kt)?;
        let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = g.softmax_lastdim(scaled)?;
        outs.push(g.batched_matmul(attn, vh[h])?);
    }
    let cat = g.concat_lastdim(&outs)?;
    let proj = g.linear(cat, p.proj.w, p.proj.b)?;
    let x1 = g.add(x, proj)?;
    let ln2 = g.layer_norm_lastdim(x1, p.ln2_gamma, p.ln2_beta)?;
    let h1 = g.linear(ln2, p.fc1.w, p.fc1.b)?;
    let act = g.gelu(h1);
    let h2 = g.linear(act, p.fc2.w, p.fc2.b)?;
    g.add(x1, h2)
}

impl Model {
    /// Builds a model with freshly initialized parameters. Weights draw
    /// uniform `±1/sqrt(fan_in)`, biases and norm shifts start at zero,
    /// norm gains at one, positions uniform `±0.02`; the channel graph is
    /// sampled once here and frozen. Everything derives from `config.seed`.
    pub fn new(config: ModelConfig, mode: Mode) -> Result<Self, ModelError> {
        let dims = config.dims()?;
        let plan = Arc::new(StftPlan::new(config.signal_len, config.stft)?);
        let stft_op = stft_operator(&plan);
        let istft_op = istft_operator(&plan)?;

        let mut g = Graph::new();
        let mut rng = rng_from_seed(mix(&[config.seed, 1]));
        let embed = init_linear(&mut g, &mut rng, dims.feat, config.base_channels)?;
        let pos_data: Vec<f64> = (0..dims.frames * config.base_channels)
            .map(|_| rng.random_range(-0.02..=0.02))
            .collect();
        let pos = g.leaf(pos_data, &[dims.frames, config.base_channels], true)?;
        let mut enc_blocks = Vec::with_capacity(config.stages);
        let mut merges = Vec::with_capacity(config.stages - 1);
        for (s, &c) in dims.channels.iter().enumerate() {
            enc_blocks.push(init_block(&mut g, &mut rng, c, config.mlp_ratio)?);
            if s + 1 < config.stages {
                merges.push(init_linear(&mut g, &mut rng, 2 * c, 2 * c)?);
            }
        }
        let mut dec_blocks = Vec::with_capacity(config.stages);
        let mut ups = Vec::with_capacity(config.stages - 1);
        for (s, &c) in dims.channels.iter().enumerate().rev() {
            dec_blocks.push(init_block(&mut g, &mut rng, c, config.mlp_ratio)?);
            if s > 0 {
                ups.push(init_linear(&mut g, &mut rng, c, c)?);
            }
        }
        let out = init_linear(&mut g, &mut rng, config.base_channels, dims.feat)?;
        let codebook = init_codebook(&mut g, config.codebook_size, dims.d, mix(&[config.seed, 2]))?;
        let msek = MsekParams::init(&mut g, config.msek_heads, dims.n, mix(&[config.seed, 3]))?;
        let channel_graph = ChannelGraph::build(dims.d, mix(&[config.seed, 4]))?;

        let params = ModelParams {
            encoder: EncoderP { embed, pos, blocks: enc_blocks, merges },
            decoder: DecoderP { blocks: dec_blocks, ups, out },
            codebook,
            msek,
        };
        let base_nodes = g.num_nodes();
        Ok(Self {
            config,
            mode,
            graph: g,
            params,
            channel_graph,
            norm: NormStats::identity(),
            plan,
            dims,
            stft_op,
            istft_op,
            base_nodes,
        })
    }

    #[must_use]
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    /// Number of trainable scalars, counted from the live tensors.
    #[must_use]
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.params.visit(&mut |_, t| total += self.graph.data(t).len());
        total
    }

    /// Drops every tape node created after the parameters, releasing the
    /// intermediate activations of the previous step.
    pub fn reset_tape(&mut self) {
        self.graph.truncate(self.base_nodes);
    }

    /// Compresses normalized spectrogram features `(b, frames, feat)` down
    /// to the bottleneck `(b, n, d)`.
    pub fn encode(&mut self, u_norm: Tensor) -> Result<Tensor, ModelError> {
        let g = &mut self.graph;
        let enc = &self.params.encoder;
        let mut t = g.linear(u_norm, enc.embed.w, enc.embed.b)?;
        t = g.add(t, enc.pos)?;
        for (s, blk) in enc.blocks.iter().enumerate() {
            t = block_forward(g, blk, t, self.config.attn_heads)?;
            if let Some(m) = enc.merges.get(s) {
                let sh = g.shape(t).to_vec();
                t = g.reshape(t, &[sh[0], sh[1] / 2, sh[2] * 2])?;
                t = g.linear(t, m.w, m.b)?;
            }
        }
        Ok(t)
    }

    /// Expands a bottleneck tensor `(b, n, d)` back to normalized
    /// spectrogram features `(b, frames, feat)`.
    pub fn decode(&mut self, z: Tensor) -> Result<Tensor, ModelError> {
        let zs = self.graph.shape(z).to_vec();
        if zs.len() != 3 || zs[1] != self.dims.n || zs[2] != self.dims.d {
            return Err(ModelError::BottleneckShape { got: zs, n: self.dims.n, d: self.dims.d });
        }
        let g = &mut self.graph;
        let dec = &self.params.decoder;
        let mut t = z;
        for (s, blk) in dec.blocks.iter().enumerate() {
            t = block_forward(g, blk, t, self.config.attn_heads)?;
            if let Some(u) = dec.ups.get(s) {
                // Transposed convolution, kernel 2 stride 2: one linear
                // produces both output tokens of a pair, then the pair is
                // split by reshape.
                t = g.linear(t, u.w, u.b)?;
                let sh = g.shape(t).to_vec();
                t = g.reshape(t, &[sh[0], sh[1] * 2, sh[2] / 2])?;
            }
        }
        Ok(g.linear(t, dec.out.w, dec.out.b)?)
    }

    /// Runs the whole pipeline on a flat batch of time-domain segments
    /// (`batch * signal_len` samples, concatenated).
    pub fn forward(&mut self, samples: &[f64]) -> Result<ForwardOut, ModelError> {
        let seg = self.config.signal_len;
        if samples.is_empty() || !samples.len().is_multiple_of(seg) {
            return Err(ModelError::BatchLen { actual: samples.len(), segment: seg });
        }
        let batch = samples.len() / seg;
        let (stft_op, istft_op) = (Arc::clone(&self.stft_op), Arc::clone(&self.istft_op));
        let norm = self.norm;

        let x = self.graph.constant(samples.to_vec(), &[batch, seg])?;
        let u_p = self.graph.apply_linear_map(stft_op, x)?;
        let u_scaled = self.graph.scale(u_p, 1.0 / norm.ppg_std);
        let u_norm = self.graph.add_scalar(u_scaled, -norm.ppg_mean / norm.ppg_std);

        let z_q = self.encode(u_norm)?;
        let (z_v, aux_loss) = if self.mode.uses_cam() {
            (cam_attend(&mut self.graph, z_q, self.params.codebook)?, None)
        } else {
            let q = nn_quantize(&mut self.graph, z_q, self.params.codebook, VQ_COMMITMENT_BETA)?;
            (q.z_v, Some(q.aux_loss))
        };
        let z_g = if self.mode.uses_msek() {
            msek_forward(&mut self.graph, z_v, &self.channel_graph, &self.params.msek)?
        } else {
            z_v
        };
        let dec_in = self.graph.add(z_g, z_q)?;
        let y_norm = self.decode(dec_in)?;
        let y_scaled = self.graph.scale(y_norm, norm.abp_std);
        let u_hat = self.graph.add_scalar(y_scaled, norm.abp_mean);
        let x_hat = self.graph.apply_linear_map(istft_op, u_hat)?;
        Ok(ForwardOut { u_hat, x_hat, z_q, z_v, z_g, dec_in, aux_loss })
    }
}

/// The reconstruction objective: mean-squared error over time-domain
/// samples plus mean-squared error over spectrogram features, equally
/// weighted. All four tensors must pair up shape-wise.
pub fn dual_domain_loss(
    g: &mut Graph,
    x_hat: Tensor,
    x_ref: Tensor,
    u_hat: Tensor,
    u_ref: Tensor,
) -> Result<Tensor, TensorError> {
    let dt = g.sub(x_hat, x_ref)?;
    let dt2 = g.mul(dt, dt)?;
    let lt = g.mean(dt2);
    let df = g.sub(u_hat, u_ref)?;
    let df2 = g.mul(df, df)?;
    let lf = g.mean(df2);
    g.add(lt, lf)
}
