//! Calibration-set construction, diffusion-style noising, and per-layer
//! activation statistics collection with optional sink masking.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{forward, AttentionTrace, CaptureFlags, Mode, NamedTensorCheckpoint};
use crate::sinkstats::SinkProfile;
use crate::{DenseMatrix, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    /// Each byte maps to its own id; needs vocab >= 257 (MASK reserved).
    Byte,
    /// Whitespace-delimited words hashed to a stable id below MASK.
    WhitespaceHash,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Vec<u32>>,
    pub tokenizer: TokenizerMode,
    pub vocab_size: u32,
}

#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub seed: u64,
}

/// Accumulated per-layer input statistics: per-column squared norms and
/// the raw Gram accumulator sum(X^T X) over all (sequence, step) pairs.
#[derive(Debug, Clone)]
pub struct LayerActivationStats {
    pub column_sq_norms: Vec<f64>,
    pub hessian_acc: DenseMatrix,
    pub sample_count: usize,
}

impl LayerActivationStats {
    pub fn new(c_in: usize) -> Self {
        Self {
            column_sq_norms: alloc::vec![0.0; c_in],
            hessian_acc: DenseMatrix::zeros(c_in, c_in),
            sample_count: 0,
        }
    }

    pub fn c_in(&self) -> usize {
        self.column_sq_norms.len()
    }

    /// Adds one captured activation matrix (rows already reweighted).
    fn accumulate(&mut self, x: &DenseMatrix) {
        let c = self.c_in();
        debug_assert_eq!(x.cols(), c);
        for r in 0..x.rows() {
            let row = x.row(r);
            for i in 0..c {
                let xi = row[i];
                self.column_sq_norms[i] += xi * xi;
                for j in 0..c {
                    let cur = self.hessian_acc.get(i, j);
                    self.hessian_acc.set(i, j, cur + xi * row[j]);
                }
            }
        }
        self.sample_count += 1;
    }
}

pub type ActivationStatsMap = BTreeMap<String, LayerActivationStats>;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic tokenization of a text fragment.
pub fn tokenize(text: &str, mode: TokenizerMode, vocab_size: u32) -> Result<Vec<u32>> {
    match mode {
        TokenizerMode::Byte => {
            if vocab_size < 257 {
                return Err(Error::VocabTooSmall { vocab_size });
            }
            Ok(text.bytes().map(u32::from).collect())
        }
        TokenizerMode::WhitespaceHash => {
            let modulus = (vocab_size - 1) as u64;
            Ok(text
                .split_whitespace()
                .map(|w| (fnv1a(w.as_bytes()) % modulus) as u32)
                .collect())
        }
    }
}

impl Corpus {
    /// Parses plain text with documents separated by blank lines.
    pub fn from_text(text: &str, tokenizer: TokenizerMode, vocab_size: u32) -> Result<Self> {
        let mut documents = Vec::new();
        for chunk in text.split("\n\n") {
            let doc = tokenize(chunk, tokenizer, vocab_size)?;
            if !doc.is_empty() {
                documents.push(doc);
            }
        }
        Ok(Self {
            documents,
            tokenizer,
            vocab_size,
        })
    }
}

/// Draws n windows of length s_cal uniformly (with replacement) over all
/// valid (document, offset) pairs.
pub fn sample_calibration(
    corpus: &Corpus,
    n: usize,
    s_cal: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    let mut valid: Vec<(usize, usize)> = Vec::new(); // (doc index, offset count)
    for (d, doc) in corpus.documents.iter().enumerate() {
        if doc.len() >= s_cal {
            valid.push((d, doc.len() - s_cal + 1));
        }
    }
    let total: usize = valid.iter().map(|(_, c)| c).sum();
    if total == 0 && n > 0 {
        return Err(Error::CorpusTooShort { required: s_cal });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0..total);
        for &(d, count) in &valid {
            if pick < count {
                sequences.push(corpus.documents[d][pick..pick + s_cal].to_vec());
                break;
            }
            pick -= count;
        }
    }
    Ok(CalibrationSet {
        sequences,
        seq_len: s_cal,
        seed,
    })
}

/// Replaces floor(S * t / T) positions (seeded uniform draw without
/// replacement) with the MASK token.
pub fn noise_at_timestep(
    seq: &[u32],
    t: usize,
    total_steps: usize,
    mask_token: u32,
    seed: u64,
) -> Result<Vec<u32>> {
    if t < 1 || t > total_steps {
        return Err(Error::InvalidSteps);
    }
    let s = seq.len();
    let n_mask = s * t / total_steps;
    let mut out: Vec<u32> = seq.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates over position indices.
    let mut idx: Vec<usize> = (0..s).collect();
    for i in 0..n_mask {
        let j = rng.gen_range(i..s);
        idx.swap(i, j);
        out[idx[i]] = mask_token;
    }
    Ok(out)
}

/// Deterministic per-(sequence, step) noise seed. Keyed by the sequence
/// content (not its index) so accumulation is order-independent.
fn noise_seed(base: u64, seq: &[u32], t: usize) -> u64 {
    let mut h = FNV_OFFSET;
    for &tok in seq {
        for b in tok.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    let mut z = base
        .wrapping_add(h.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add((t as u64).wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// The (sequence, step) forward passes shared by trace collection and
/// activation collection. AR mode runs a single clean pass per sequence.
fn forward_passes(
    ckpt: &NamedTensorCheckpoint,
    calib: &CalibrationSet,
    timesteps: &[usize],
    total_steps: usize,
) -> Result<Vec<Vec<Vec<u32>>>> {
    let diffusion = ckpt.config.mode == Mode::MaskedDiffusion;
    if diffusion && timesteps.is_empty() {
        return Err(Error::EmptyTimestepSet);
    }
    let mut passes = Vec::new();
    for seq in &calib.sequences {
        if seq.len() != calib.seq_len {
            return Err(Error::MixedSequenceLengths);
        }
        let inputs = if diffusion {
            timesteps
                .iter()
                .map(|&t| {
                    noise_at_timestep(
                        seq,
                        t,
                        total_steps,
                        ckpt.config.mask_token(),
                        noise_seed(calib.seed, seq, t),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            alloc::vec![seq.clone()]
        };
        passes.push(inputs);
    }
    Ok(passes)
}

/// Pass 1 of the two-pass protocol: attention snapshots of the noised
/// calibration forwards, one trace per sequence with one step per
/// selected timestep.
pub fn collect_calibration_traces(
    ckpt: &NamedTensorCheckpoint,
    calib: &CalibrationSet,
    timesteps: &[usize],
    total_steps: usize,
) -> Result<Vec<AttentionTrace>> {
    let mut traces = Vec::new();
    for inputs in forward_passes(ckpt, calib, timesteps, total_steps)? {
        let mut trace = AttentionTrace::default();
        for tokens in &inputs {
            let out = forward(ckpt, tokens, CaptureFlags::attention_only())?;
            trace.steps.push(out.attention);
            trace.sequences.push(tokens.clone());
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// Pass 2: accumulates per-layer sum(X^T X) and column squared norms over
/// the same noised forwards, with rows scaled by omega when a sink
/// profile is supplied.
pub fn collect_activations(
    ckpt: &NamedTensorCheckpoint,
    calib: &CalibrationSet,
    timesteps: &[usize],
    total_steps: usize,
    sink_profile: Option<&SinkProfile>,
) -> Result<ActivationStatsMap> {
    if let Some(p) = sink_profile {
        if p.omega.len() != calib.seq_len {
            return Err(Error::ProfileLengthMismatch {
                profile_len: p.omega.len(),
                seq_len: calib.seq_len,
            });
        }
    }
    let mut stats: ActivationStatsMap = BTreeMap::new();
    for inputs in forward_passes(ckpt, calib, timesteps, total_steps)? {
        for tokens in &inputs {
            let out = forward(ckpt, tokens, CaptureFlags::all())?;
            for (name, x) in &out.activations.inputs {
                let mut x = x.clone();
                if let Some(p) = sink_profile {
                    for r in 0..x.rows() {
                        let w = p.omega[r];
                        for v in x.row_mut(r) {
                            *v *= w;
                        }
                    }
                }
                stats
                    .entry(name.clone())
                    .or_insert_with(|| LayerActivationStats::new(x.cols()))
                    .accumulate(&x);
            }
        }
    }
    Ok(stats)
}
