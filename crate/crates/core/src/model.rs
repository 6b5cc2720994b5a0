//! A seeded toy transformer that runs in autoregressive (causal) or
//! masked-diffusion (bidirectional) mode and exposes per-step attention
//! maps plus per-layer linear inputs.
//!
//! Architecture: pre-norm blocks with parameter-free layer norm,
//! sinusoidal absolute position encodings, GELU feed-forward. Each layer
//! owns exactly six named weight matrices; embedding and unembedding are
//! shared model-level tensors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{DenseMatrix, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Autoregressive,
    MaskedDiffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: u32,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig {
                context: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig {
                context: format!("vocab_size {} < 2", self.vocab_size),
            });
        }
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig {
                context: String::from("zero-sized dimension"),
            });
        }
        Ok(())
    }

    /// In diffusion mode the highest token id is reserved as MASK.
    pub fn mask_token(&self) -> u32 {
        self.vocab_size - 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Canonical tensor names, in a fixed order.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec![String::from("embedding")];
    for l in 0..config.n_layers {
        for t in [
            "attn.q_proj",
            "attn.k_proj",
            "attn.v_proj",
            "attn.o_proj",
            "ff_up",
            "ff_down",
        ] {
            names.push(format!("layer.{l}.{t}"));
        }
    }
    names.push(String::from("unembedding"));
    names
}

/// Shape (rows, cols) of a named tensor, rows = output dim.
pub fn tensor_shape(config: &ModelConfig, name: &str) -> Result<(usize, usize)> {
    let d = config.d_model;
    let shape = if name == "embedding" {
        (config.vocab_size as usize, d)
    } else if name == "unembedding" {
        (d, config.vocab_size as usize)
    } else if name.ends_with("ff_up") {
        (config.d_ff, d)
    } else if name.ends_with("ff_down") {
        (d, config.d_ff)
    } else if name.contains(".attn.") {
        (d, d)
    } else {
        return Err(Error::ShapeMismatch {
            context: format!("unknown tensor name {name}"),
        });
    };
    Ok(shape)
}

/// Weight matrices keyed by canonical layer name, plus the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensorCheckpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, DenseMatrix>,
}

impl NamedTensorCheckpoint {
    pub fn tensor(&self, name: &str) -> Result<&DenseMatrix> {
        self.tensors.get(name).ok_or_else(|| Error::ShapeMismatch {
            context: format!("missing tensor {name}"),
        })
    }

    /// Names of the per-layer linear tensors (the prunable set).
    pub fn prunable_names(&self) -> Vec<String> {
        tensor_names(&self.config)
            .into_iter()
            .filter(|n| n.starts_with("layer."))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let names = tensor_names(&self.config);
        if names.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "expected {} tensors, found {}",
                    names.len(),
                    self.tensors.len()
                ),
            });
        }
        for name in &names {
            let t = self.tensor(name)?;
            let (r, c) = tensor_shape(&self.config, name)?;
            if t.rows() != r || t.cols() != c {
                return Err(Error::ShapeMismatch {
                    context: format!("{name}: {}x{}, expected {r}x{c}", t.rows(), t.cols()),
                });
            }
        }
        Ok(())
    }
}

/// Draws a fresh checkpoint with zero-mean uniform weights of scale
/// 1/sqrt(d_model). Bit-identical for equal seeds.
pub fn init_random_model(config: &ModelConfig) -> Result<NamedTensorCheckpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Uniform on [-a, a] has std a/sqrt(3); pick a so std = 1/sqrt(d_model).
    let a = libm::sqrt(3.0) / libm::sqrt(config.d_model as f64);
    let mut tensors = BTreeMap::new();
    for name in tensor_names(config) {
        let (r, c) = tensor_shape(config, &name)?;
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-a..a)).collect();
        tensors.insert(name, DenseMatrix::new(r, c, data)?);
    }
    Ok(NamedTensorCheckpoint {
        config: *config,
        tensors,
    })
}

/// Per-layer linear inputs captured during a forward pass, keyed by
/// tensor name. Each matrix is S×C_in with one row per position.
#[derive(Debug, Clone, Default)]
pub struct ActivationCapture {
    pub inputs: BTreeMap<String, DenseMatrix>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureFlags {
    pub attention: bool,
    pub activations: bool,
}

impl CaptureFlags {
    pub fn all() -> Self {
        Self {
            attention: true,
            activations: true,
        }
    }
    pub fn attention_only() -> Self {
        Self {
            attention: true,
            activations: false,
        }
    }
}

/// One step's attention snapshot: `[layer][head]` row-stochastic S×S maps.
pub type StepAttention = Vec<Vec<DenseMatrix>>;

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: DenseMatrix,
    pub attention: StepAttention,
    pub activations: ActivationCapture,
}

/// Per-step attention snapshots collected across a generation run.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub steps: Vec<StepAttention>,
    /// Token sequence as it stood after each step.
    pub sequences: Vec<Vec<u32>>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn layer_norm_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean: f64 = row.iter().sum::<f64>() / d;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / libm::sqrt(var + 1e-5);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Applies a linear layer y = x·Wᵀ (x is S×C_in, w is C_out×C_in).
fn linear(x: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    x.matmul(&w.transpose())
}

/// Sinusoidal absolute position encoding row.
fn position_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let freq = libm::pow(10000.0, -(2.0 * i as f64) / d_model as f64);
        let angle = pos as f64 * freq;
        pe[2 * i] = libm::sin(angle);
        pe[2 * i + 1] = libm::cos(angle);
    }
    if d_model % 2 == 1 {
        let i = d_model / 2;
        let freq = libm::pow(10000.0, -(2.0 * i as f64) / d_model as f64);
        pe[d_model - 1] = libm::sin(pos as f64 * freq);
    }
    pe
}

/// Runs the full stack over a token sequence.
pub fn forward(
    ckpt: &NamedTensorCheckpoint,
    tokens: &[u32],
    capture: CaptureFlags,
) -> Result<ForwardOutput> {
    let cfg = &ckpt.config;
    let s = tokens.len();
    if s > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: cfg.vocab_size,
        });
    }
    let d = cfg.d_model;
    let emb = ckpt.tensor("embedding")?;
    let mut x = DenseMatrix::zeros(s, d);
    for (r, &t) in tokens.iter().enumerate() {
        let pe = position_encoding(r, d);
        let erow = emb.row(t as usize);
        let xr = x.row_mut(r);
        for c in 0..d {
            xr[c] = erow[c] + pe[c];
        }
    }

    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let causal = cfg.mode == Mode::Autoregressive;

    let mut attention: StepAttention = Vec::new();
    let mut activations = ActivationCapture::default();

    for l in 0..cfg.n_layers {
        let ln1 = layer_norm_rows(&x);
        if capture.activations {
            for t in ["attn.q_proj", "attn.k_proj", "attn.v_proj"] {
                activations
                    .inputs
                    .insert(format!("layer.{l}.{t}"), ln1.clone());
            }
        }
        let q = linear(&ln1, ckpt.tensor(&format!("layer.{l}.attn.q_proj"))?)?;
        let k = linear(&ln1, ckpt.tensor(&format!("layer.{l}.attn.k_proj"))?)?;
        let v = linear(&ln1, ckpt.tensor(&format!("layer.{l}.attn.v_proj"))?)?;

        let mut heads: Vec<DenseMatrix> = Vec::with_capacity(h);
        let mut attn_out = DenseMatrix::zeros(s, d);
        for hd in 0..h {
            let off = hd * dh;
            let mut a = DenseMatrix::zeros(s, s);
            for i in 0..s {
                let limit = if causal { i + 1 } else { s };
                {
                    let arow = a.row_mut(i);
                    for j in 0..limit {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q.get(i, off + c) * k.get(j, off + c);
                        }
                        arow[j] = dot * scale;
                    }
                    softmax_row(&mut arow[..limit]);
                    for j in limit..s {
                        arow[j] = 0.0;
                    }
                }
            }
            // head output: A · V_h
            for i in 0..s {
                for j in 0..(if causal { i + 1 } else { s }) {
                    let w = a.get(i, j);
                    for c in 0..dh {
                        let cur = attn_out.get(i, off + c);
                        attn_out.set(i, off + c, cur + w * v.get(j, off + c));
                    }
                }
            }
            heads.push(a);
        }
        if capture.attention {
            attention.push(heads);
        }
        if capture.activations {
            activations
                .inputs
                .insert(format!("layer.{l}.attn.o_proj"), attn_out.clone());
        }
        let o = linear(&attn_out, ckpt.tensor(&format!("layer.{l}.attn.o_proj"))?)?;
        for (xv, ov) in x.data_mut().iter_mut().zip(o.data()) {
            *xv += ov;
        }

        let ln2 = layer_norm_rows(&x);
        if capture.activations {
            activations
                .inputs
                .insert(format!("layer.{l}.ff_up"), ln2.clone());
        }
        let mut up = linear(&ln2, ckpt.tensor(&format!("layer.{l}.ff_up"))?)?;
        for uv in up.data_mut().iter_mut() {
            *uv = gelu(*uv);
        }
        if capture.activations {
            activations
                .inputs
                .insert(format!("layer.{l}.ff_down"), up.clone());
        }
        let down = linear(&up, ckpt.tensor(&format!("layer.{l}.ff_down"))?)?;
        for (xv, dv) in x.data_mut().iter_mut().zip(down.data()) {
            *xv += dv;
        }
    }

    let final_ln = layer_norm_rows(&x);
    let logits = final_ln.matmul(ckpt.tensor("unembedding")?)?;
    Ok(ForwardOutput {
        logits,
        attention,
        activations,
    })
}

/// Greedy argmax with ties broken by lowest token id.
fn argmax_token(logits_row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits_row.iter().enumerate() {
        if v > logits_row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy autoregressive decoding; step t records attention over the
/// sequence of length |prompt| + t.
pub fn decode_ar(
    ckpt: &NamedTensorCheckpoint,
    prompt: &[u32],
    n_new: usize,
) -> Result<(Vec<u32>, AttentionTrace)> {
    if ckpt.config.mode != Mode::Autoregressive {
        return Err(Error::WrongMode);
    }
    let mut seq: Vec<u32> = prompt.into();
    let mut trace = AttentionTrace::default();
    for _ in 0..n_new {
        let out = forward(ckpt, &seq, CaptureFlags::attention_only())?;
        let next = argmax_token(out.logits.row(seq.len() - 1));
        trace.steps.push(out.attention);
        seq.push(next);
        trace.sequences.push(seq.clone());
    }
    Ok((seq, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnmaskSchedule {
    /// Commit the masked positions with the highest max-probability.
    Confidence,
    /// Commit uniformly random masked positions from a seeded generator.
    Random,
}

/// Iterative denoising: the generation region starts fully MASK and is
/// committed over exactly `n_steps` full-sequence forward passes.
pub fn denoise_diffusion(
    ckpt: &NamedTensorCheckpoint,
    prompt: &[u32],
    gen_len: usize,
    n_steps: usize,
    schedule: UnmaskSchedule,
    seed: u64,
) -> Result<(Vec<u32>, AttentionTrace)> {
    let cfg = &ckpt.config;
    if cfg.mode != Mode::MaskedDiffusion {
        return Err(Error::WrongMode);
    }
    if n_steps == 0 {
        return Err(Error::InvalidSteps);
    }
    let mask = cfg.mask_token();
    let mut seq: Vec<u32> = prompt.into();
    seq.extend(core::iter::repeat(mask).take(gen_len));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = AttentionTrace::default();

    for step in 0..n_steps {
        let out = forward(ckpt, &seq, CaptureFlags::attention_only())?;
        let masked: Vec<usize> = (prompt.len()..seq.len())
            .filter(|&i| seq[i] == mask)
            .collect();
        let steps_left = n_steps - step;
        let commit_n = masked.len().div_ceil(steps_left);
        let chosen: Vec<usize> = match schedule {
            UnmaskSchedule::Confidence => {
                // max softmax probability == max logit margin; rank by max
                // logit minus log-sum-exp, ties broken by lowest position.
                let mut scored: Vec<(usize, f64)> = masked
                    .iter()
                    .map(|&i| {
                        let row = out.logits.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse: f64 =
                            libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>()) + max;
                        (i, max - lse)
                    })
                    .collect();
                scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                scored.into_iter().take(commit_n).map(|(i, _)| i).collect()
            }
            UnmaskSchedule::Random => {
                let mut pool = masked.clone();
                let mut picks = Vec::with_capacity(commit_n);
                for _ in 0..commit_n.min(pool.len()) {
                    let idx = rng.gen_range(0..pool.len());
                    picks.push(pool.swap_remove(idx));
                }
                picks
            }
        };
        for i in chosen {
            // Never commit the MASK id itself; argmax over data tokens.
            let row = &out.logits.row(i)[..mask as usize];
            seq[i] = argmax_token(row);
        }
        trace.steps.push(out.attention);
        trace.sequences.push(seq.clone());
    }
    debug_assert!(seq.iter().all(|&t| t != mask || prompt.contains(&mask)));
    Ok((seq, trace))
}
