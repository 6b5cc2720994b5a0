//! Quality metrics for pruned checkpoints: layer-wise reconstruction
//! error, masked-token accuracy, pseudo-perplexity, and sparsity
//! accounting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationSet, LayerActivationStats};
use crate::model::{forward, CaptureFlags, Mode, NamedTensorCheckpoint};
use crate::{DenseMatrix, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub recon_error: BTreeMap<String, f64>,
    pub masked_accuracy: f64,
    pub pseudo_perplexity: f64,
    pub global_sparsity: f64,
}

/// trace((W - W~) H_raw (W - W~)^T) with H_raw = sum(X^T X), which equals
/// the summed squared reconstruction error ||W X^T - W~ X^T||_F^2 over the
/// calibration data.
pub fn reconstruction_error(
    w: &DenseMatrix,
    w_tilde: &DenseMatrix,
    stats: &LayerActivationStats,
) -> Result<f64> {
    if w.rows() != w_tilde.rows() || w.cols() != w_tilde.cols() || w.cols() != stats.c_in() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "recon {}x{} vs {}x{} with c_in {}",
                w.rows(),
                w.cols(),
                w_tilde.rows(),
                w_tilde.cols(),
                stats.c_in()
            ),
        });
    }
    let h = &stats.hessian_acc;
    let c = w.cols();
    let mut total = 0.0;
    for r in 0..w.rows() {
        let delta: Vec<f64> = (0..c).map(|j| w.get(r, j) - w_tilde.get(r, j)).collect();
        for i in 0..c {
            if delta[i] == 0.0 {
                continue;
            }
            let mut hrow = 0.0;
            for j in 0..c {
                hrow += h.get(i, j) * delta[j];
            }
            total += delta[i] * hrow;
        }
    }
    // Clamp tiny negative values from floating-point cancellation.
    Ok(total.max(0.0))
}

fn log_softmax_prob(logits: &[f64], token: u32) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = libm::log(logits.iter().map(|&v| libm::exp(v - max)).sum::<f64>()) + max;
    logits[token as usize] - lse
}

fn eval_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

/// Masks a fraction of every sequence, runs one denoising forward, and
/// reports the fraction of masked positions predicted exactly. Zero
/// masked positions count as vacuous accuracy 1.0.
pub fn masked_accuracy(
    ckpt: &NamedTensorCheckpoint,
    eval_set: &CalibrationSet,
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    if ckpt.config.mode != Mode::MaskedDiffusion {
        return Err(Error::WrongMode);
    }
    let mask = ckpt.config.mask_token();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (si, seq) in eval_set.sequences.iter().enumerate() {
        let s = seq.len();
        let n_mask = ((s as f64) * mask_ratio) as usize;
        if n_mask == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed, si));
        let mut idx: Vec<usize> = (0..s).collect();
        let mut masked = seq.clone();
        let mut positions = Vec::with_capacity(n_mask);
        for i in 0..n_mask {
            let j = rng.gen_range(i..s);
            idx.swap(i, j);
            masked[idx[i]] = mask;
            positions.push(idx[i]);
        }
        let out = forward(ckpt, &masked, CaptureFlags::default())?;
        for p in positions {
            let row = out.logits.row(p);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best as u32 == seq[p] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    })
}

/// exp(mean negative log-probability of the true token), masking one
/// position at a time over a seeded sample of positions per sequence.
pub fn pseudo_perplexity(
    ckpt: &NamedTensorCheckpoint,
    eval_set: &CalibrationSet,
    positions_per_seq: usize,
    seed: u64,
) -> Result<f64> {
    if ckpt.config.mode != Mode::MaskedDiffusion {
        return Err(Error::WrongMode);
    }
    let mask = ckpt.config.mask_token();
    let mut nll = 0.0;
    let mut count = 0usize;
    for (si, seq) in eval_set.sequences.iter().enumerate() {
        let s = seq.len();
        let k = positions_per_seq.min(s);
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed, si));
        let mut idx: Vec<usize> = (0..s).collect();
        for i in 0..k {
            let j = rng.gen_range(i..s);
            idx.swap(i, j);
        }
        for &p in &idx[..k] {
            let mut masked = seq.clone();
            masked[p] = mask;
            let out = forward(ckpt, &masked, CaptureFlags::default())?;
            nll -= log_softmax_prob(out.logits.row(p), seq[p]);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok(libm::exp(nll / count as f64))
}

/// Teacher-forced next-token accuracy (AR substitute for masked accuracy).
pub fn next_token_accuracy(
    ckpt: &NamedTensorCheckpoint,
    eval_set: &CalibrationSet,
) -> Result<f64> {
    if ckpt.config.mode != Mode::Autoregressive {
        return Err(Error::WrongMode);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in &eval_set.sequences {
        if seq.len() < 2 {
            continue;
        }
        let out = forward(ckpt, seq, CaptureFlags::default())?;
        for i in 0..seq.len() - 1 {
            let row = out.logits.row(i);
            let mut best = 0usize;
            for (t, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = t;
                }
            }
            if best as u32 == seq[i + 1] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    })
}

/// Teacher-forced next-token perplexity (AR substitute).
pub fn next_token_perplexity(
    ckpt: &NamedTensorCheckpoint,
    eval_set: &CalibrationSet,
) -> Result<f64> {
    if ckpt.config.mode != Mode::Autoregressive {
        return Err(Error::WrongMode);
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in &eval_set.sequences {
        if seq.len() < 2 {
            continue;
        }
        let out = forward(ckpt, seq, CaptureFlags::default())?;
        for i in 0..seq.len() - 1 {
            nll -= log_softmax_prob(out.logits.row(i), seq[i + 1]);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok(libm::exp(nll / count as f64))
}

/// zeros / total over all per-layer linear tensors (embedding and
/// unembedding excluded).
pub fn global_sparsity(ckpt: &NamedTensorCheckpoint) -> f64 {
    let mut zeros = 0usize;
    let mut total = 0usize;
    for name in ckpt.prunable_names() {
        let t = &ckpt.tensors[&name];
        zeros += t.data().iter().filter(|&&v| v == 0.0).count();
        total += t.data().len();
    }
    zeros as f64 / total.max(1) as f64
}
