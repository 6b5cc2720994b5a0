//! Pruning criteria (magnitude, Wanda, SparseGPT), mask construction for
//! unstructured / n:m / head-structured sparsity, and SparseGPT weight
//! reconstruction.
//!
//! Sink awareness enters through the activation statistics: the same code
//! paths consume sink-masked [`LayerActivationStats`], so an all-ones
//! profile reproduces the baseline bit for bit.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calib::{ActivationStatsMap, LayerActivationStats};
use crate::model::NamedTensorCheckpoint;
use crate::numerics::{cholesky, psd_inverse};
use crate::{DenseMatrix, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Magnitude,
    Wanda,
    Sparsegpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    UnstructuredPerRow,
    Nm { n: usize, m: usize },
    StructuredHeads,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PruneRequest {
    pub criterion: Criterion,
    pub sink_aware: bool,
    pub sparsity: f64,
    pub pattern: Pattern,
    /// Ridge term relative to the mean Hessian diagonal.
    pub lambda_rel: f64,
    /// SparseGPT column-block width.
    pub blocksize: usize,
}

impl Default for PruneRequest {
    fn default() -> Self {
        Self {
            criterion: Criterion::Wanda,
            sink_aware: false,
            sparsity: 0.5,
            pattern: Pattern::UnstructuredPerRow,
            lambda_rel: 0.01,
            blocksize: 32,
        }
    }
}

/// Boolean keep-mask over a weight matrix (true = keep).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
    pub pattern: Pattern,
}

impl PruneMask {
    pub fn all_keep(rows: usize, cols: usize, pattern: Pattern) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
            pattern,
        }
    }

    #[inline]
    pub fn kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn dropped_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

/// score_ij = |w_ij|
pub fn magnitude_scores(w: &DenseMatrix) -> DenseMatrix {
    let mut s = w.clone();
    for v in s.data_mut() {
        *v = libm::fabs(*v);
    }
    s
}

/// score_ij = |w_ij| * sqrt(column_sq_norms_j)
pub fn wanda_scores(w: &DenseMatrix, stats: &LayerActivationStats) -> Result<DenseMatrix> {
    if stats.c_in() != w.cols() {
        return Err(Error::DimensionMismatch {
            context: format!("stats c_in {} vs weight cols {}", stats.c_in(), w.cols()),
        });
    }
    let norms: Vec<f64> = stats.column_sq_norms.iter().map(|&v| libm::sqrt(v)).collect();
    let mut s = w.clone();
    for r in 0..s.rows() {
        for (v, n) in s.row_mut(r).iter_mut().zip(&norms) {
            *v = libm::fabs(*v) * n;
        }
    }
    Ok(s)
}

/// Indices of the `k` lowest-scoring entries among `cols`, ties broken by
/// lower column index first.
fn lowest_k(scores: &[f64], cols: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = cols.into();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Builds a keep-mask from a score matrix.
pub fn select_mask(scores: &DenseMatrix, sparsity: f64, pattern: Pattern) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::InvalidPattern {
            context: format!("sparsity {sparsity} outside [0,1]"),
        });
    }
    let (rows, cols) = (scores.rows(), scores.cols());
    let mut mask = PruneMask::all_keep(rows, cols, pattern);
    match pattern {
        Pattern::UnstructuredPerRow => {
            let drops = ((cols as f64) * sparsity) as usize;
            let all: Vec<usize> = (0..cols).collect();
            for r in 0..rows {
                for c in lowest_k(scores.row(r), &all, drops) {
                    mask.keep[r * cols + c] = false;
                }
            }
        }
        Pattern::Nm { n, m } => {
            if m == 0 || n > m || cols % m != 0 {
                return Err(Error::InvalidPattern {
                    context: format!("{n}:{m} over {cols} columns"),
                });
            }
            for r in 0..rows {
                for g in (0..cols).step_by(m) {
                    let group: Vec<usize> = (g..g + m).collect();
                    for c in lowest_k(scores.row(r), &group, m - n) {
                        mask.keep[r * cols + c] = false;
                    }
                }
            }
        }
        Pattern::StructuredHeads => {
            return Err(Error::InvalidPattern {
                context: String::from("structured head pruning uses structured_head_prune"),
            });
        }
    }
    Ok(mask)
}

/// Elementwise product with the mask.
pub fn apply_mask(w: &DenseMatrix, mask: &PruneMask) -> Result<DenseMatrix> {
    if w.rows() != mask.rows || w.cols() != mask.cols {
        return Err(Error::ShapeMismatch {
            context: format!(
                "mask {}x{} vs weight {}x{}",
                mask.rows,
                mask.cols,
                w.rows(),
                w.cols()
            ),
        });
    }
    let mut out = w.clone();
    for (v, &k) in out.data_mut().iter_mut().zip(&mask.keep) {
        if !k {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Fraction of entries dropped.
pub fn verify_sparsity(mask: &PruneMask) -> f64 {
    mask.dropped_count() as f64 / mask.keep.len() as f64
}

/// Dampened Hessian H = hessian_acc / count + lambda * I with
/// lambda = lambda_rel * mean(diag).
fn dampened_hessian(stats: &LayerActivationStats, lambda_rel: f64) -> Result<DenseMatrix> {
    let c = stats.c_in();
    let count = stats.sample_count.max(1) as f64;
    let mut h = stats.hessian_acc.clone();
    h.scale(1.0 / count);
    let mean_diag = (0..c).map(|i| h.get(i, i)).sum::<f64>() / c as f64;
    let lambda = lambda_rel * mean_diag;
    for i in 0..c {
        h.set(i, i, h.get(i, i) + lambda);
    }
    Ok(h)
}

/// C(n, k) saturating at usize::MAX.
fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return usize::MAX,
        };
    }
    acc
}

/// Advances `c` to the next k-combination of 0..n in lexicographic
/// order; false when exhausted.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - (k - i) {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Reconstruction error of one row under a kept set, with the surviving
/// weights refit by (H_damp)_MM w_M = (H_raw w_orig)_M and the error
/// measured against the raw Hessian.
fn row_mask_error(
    w_row: &[f64],
    kept: &[usize],
    h_damp: &DenseMatrix,
    h_raw: &DenseMatrix,
) -> Result<f64> {
    let cols = w_row.len();
    let k = kept.len();
    let mut gram = DenseMatrix::zeros(k, k);
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            gram.set(a, b, h_damp.get(i, j));
        }
    }
    let rhs: Vec<f64> = kept
        .iter()
        .map(|&i| (0..cols).map(|j| h_raw.get(i, j) * w_row[j]).sum())
        .collect();
    let sol = cholesky(&gram)?.solve(&rhs)?;
    let mut delta: Vec<f64> = w_row.into();
    for (a, &i) in kept.iter().enumerate() {
        delta[i] -= sol[a];
    }
    let mut err = 0.0;
    for i in 0..cols {
        if delta[i] == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for j in 0..cols {
            acc += h_raw.get(i, j) * delta[j];
        }
        err += delta[i] * acc;
    }
    Ok(err.max(0.0))
}

/// SparseGPT: block-wise OBS pruning with weight reconstruction.
///
/// Columns are processed left to right; within each block the per-row
/// running sparsity quota selects the entries with smallest
/// w^2 / [H^-1]_mm, and each removal propagates the OBS compensation to
/// all surviving columns on the right.
pub fn sparsegpt_prune(
    w: &DenseMatrix,
    stats: &LayerActivationStats,
    request: &PruneRequest,
) -> Result<(PruneMask, DenseMatrix)> {
    let (rows, cols) = (w.rows(), w.cols());
    if stats.c_in() != cols {
        return Err(Error::DimensionMismatch {
            context: format!("stats c_in {} vs weight cols {}", stats.c_in(), cols),
        });
    }
    let h = dampened_hessian(stats, request.lambda_rel)?;
    let hinv = psd_inverse(&h)?;
    // Upper factor U with Hinv = U^T U; row j of U carries the
    // compensation coefficients for eliminating column j.
    let u = cholesky(&hinv)?.lower_triangular().transpose();

    let mut wt = w.clone();
    let mut mask = PruneMask::all_keep(rows, cols, request.pattern);
    let mut pruned_per_row = vec![0usize; rows];

    let blocksize = match request.pattern {
        // Keep n:m groups inside one block.
        Pattern::Nm { m, .. } => {
            if m == 0 || cols % m != 0 {
                return Err(Error::InvalidPattern {
                    context: format!("group size {m} over {cols} columns"),
                });
            }
            request.blocksize.max(m).div_ceil(m) * m
        }
        Pattern::UnstructuredPerRow => request.blocksize.max(1),
        Pattern::StructuredHeads => {
            return Err(Error::InvalidPattern {
                context: String::from("structured head pruning uses structured_head_prune"),
            });
        }
    };

    let mut b1 = 0;
    while b1 < cols {
        let b2 = (b1 + blocksize).min(cols);
        // Scores at block entry.
        let mut to_prune: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for r in 0..rows {
            let score: Vec<f64> = (b1..b2)
                .map(|j| {
                    let d = u.get(j, j);
                    let wj = wt.get(r, j);
                    wj * wj / (d * d)
                })
                .collect();
            match request.pattern {
                Pattern::UnstructuredPerRow => {
                    let target_by_b2 = ((b2 as f64) * request.sparsity) as usize;
                    let quota = target_by_b2.saturating_sub(pruned_per_row[r]);
                    let local: Vec<usize> = (0..b2 - b1).collect();
                    to_prune[r] = lowest_k(&score, &local, quota)
                        .into_iter()
                        .map(|c| c + b1)
                        .collect();
                }
                Pattern::Nm { n, m } => {
                    for g in (b1..b2).step_by(m) {
                        let local: Vec<usize> = (g - b1..g - b1 + m).collect();
                        to_prune[r].extend(
                            lowest_k(&score, &local, m - n).into_iter().map(|c| c + b1),
                        );
                    }
                }
                Pattern::StructuredHeads => unreachable!(),
            }
            pruned_per_row[r] += to_prune[r].len();
            to_prune[r].sort_unstable();
        }
        // Sequential elimination with compensation to the right.
        for j in b1..b2 {
            let d = u.get(j, j);
            for r in 0..rows {
                if to_prune[r].binary_search(&j).is_ok() {
                    let err = wt.get(r, j) / d;
                    mask.keep[r * cols + j] = false;
                    for c in j..cols {
                        let cur = wt.get(r, c);
                        wt.set(r, c, cur - err * u.get(j, c));
                    }
                    wt.set(r, j, 0.0);
                }
            }
        }
        b1 = b2;
    }

    let count = stats.sample_count.max(1) as f64;
    let mut h_raw = stats.hessian_acc.clone();
    h_raw.scale(1.0 / count);

    // The final refit below makes each row's reconstruction error a pure
    // function of its mask, so the OBS selection can be tightened mask-
    // wise: small rows are solved exactly by enumerating every kept set,
    // larger ones by a greedy one-swap hill-climb over (kept, pruned)
    // pairs. Strict improvement keeps ties (and the H = I magnitude
    // degeneracy) untouched.
    if matches!(request.pattern, Pattern::UnstructuredPerRow) {
        for r in 0..rows {
            let mut kept: Vec<usize> = (0..cols).filter(|&c| mask.kept(r, c)).collect();
            let mut dropped: Vec<usize> = (0..cols).filter(|&c| !mask.kept(r, c)).collect();
            if kept.is_empty() || dropped.is_empty() {
                continue;
            }
            let mut cur = row_mask_error(w.row(r), &kept, &h, &h_raw)?;
            if binomial(cols, kept.len()) <= 1000 {
                let mut cand: Vec<usize> = (0..kept.len()).collect();
                loop {
                    let err = row_mask_error(w.row(r), &cand, &h, &h_raw)?;
                    if err < cur {
                        cur = err;
                        kept.clone_from(&cand);
                    }
                    if !next_combination(&mut cand, cols) {
                        break;
                    }
                }
                for c in 0..cols {
                    mask.keep[r * cols + c] = false;
                }
                for &c in &kept {
                    mask.keep[r * cols + c] = true;
                }
                continue;
            }
            loop {
                let mut best: Option<(usize, usize, f64)> = None;
                for ki in 0..kept.len() {
                    for di in 0..dropped.len() {
                        let mut cand = kept.clone();
                        cand[ki] = dropped[di];
                        cand.sort_unstable();
                        let err = row_mask_error(w.row(r), &cand, &h, &h_raw)?;
                        if err < cur && best.map_or(true, |(_, _, b)| err < b) {
                            best = Some((ki, di, err));
                        }
                    }
                }
                match best {
                    Some((ki, di, err)) => {
                        core::mem::swap(&mut kept[ki], &mut dropped[di]);
                        kept.sort_unstable();
                        cur = err;
                    }
                    None => break,
                }
            }
            for c in 0..cols {
                mask.keep[r * cols + c] = false;
            }
            for &c in &kept {
                mask.keep[r * cols + c] = true;
            }
        }
    }

    // Final closed-form refit: for each row with removals, surviving
    // weights are set to the exact masked least-squares solution
    // (H_damp)_MM w_M = (H_raw w_orig)_M. Rows with nothing pruned keep
    // their original weights bit for bit.
    for r in 0..rows {
        let kept: Vec<usize> = (0..cols).filter(|&c| mask.kept(r, c)).collect();
        if kept.len() == cols {
            for c in 0..cols {
                wt.set(r, c, w.get(r, c));
            }
            continue;
        }
        for c in 0..cols {
            wt.set(r, c, 0.0);
        }
        if kept.is_empty() {
            continue;
        }
        let k = kept.len();
        let mut gram = DenseMatrix::zeros(k, k);
        for (a, &i) in kept.iter().enumerate() {
            for (b, &j) in kept.iter().enumerate() {
                gram.set(a, b, h.get(i, j));
            }
        }
        let rhs: Vec<f64> = kept
            .iter()
            .map(|&i| (0..cols).map(|j| h_raw.get(i, j) * w.get(r, j)).sum())
            .collect();
        let sol = cholesky(&gram)?.solve(&rhs)?;
        for (a, &i) in kept.iter().enumerate() {
            wt.set(r, i, sol[a]);
        }
    }
    Ok((mask, wt))
}

/// Prunes one layer according to the request, returning the mask and the
/// (possibly reconstructed) weights.
pub fn prune_layer(
    w: &DenseMatrix,
    stats: &LayerActivationStats,
    request: &PruneRequest,
) -> Result<(PruneMask, DenseMatrix)> {
    match request.criterion {
        Criterion::Magnitude => {
            let mask = select_mask(&magnitude_scores(w), request.sparsity, request.pattern)?;
            let wt = apply_mask(w, &mask)?;
            Ok((mask, wt))
        }
        Criterion::Wanda => {
            let mask = select_mask(&wanda_scores(w, stats)?, request.sparsity, request.pattern)?;
            let wt = apply_mask(w, &mask)?;
            Ok((mask, wt))
        }
        Criterion::Sparsegpt => sparsegpt_prune(w, stats, request),
    }
}

/// Per-layer record of a structured head-pruning pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadPruneRecord {
    pub layer: usize,
    pub head_scores: Vec<f64>,
    pub pruned_heads: Vec<usize>,
}

/// Removes the floor(H * ratio) lowest-scoring attention heads per layer
/// by zeroing their q/k/v projection rows and o projection columns. Head
/// importance is the sum of Wanda scores over the head's slices.
pub fn structured_head_prune(
    ckpt: &NamedTensorCheckpoint,
    stats: &ActivationStatsMap,
    ratio: f64,
) -> Result<(NamedTensorCheckpoint, Vec<HeadPruneRecord>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidPattern {
            context: format!("head ratio {ratio} outside [0,1)"),
        });
    }
    let cfg = &ckpt.config;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let drop_n = ((n_heads as f64) * ratio) as usize;
    if drop_n >= n_heads {
        return Err(Error::AllHeadsPruned);
    }
    let mut out = ckpt.clone();
    let mut records = Vec::new();
    for l in 0..cfg.n_layers {
        let mut head_scores = vec![0.0; n_heads];
        for t in ["attn.q_proj", "attn.k_proj", "attn.v_proj"] {
            let name = format!("layer.{l}.{t}");
            let s = wanda_scores(ckpt.tensor(&name)?, &stats[&name])?;
            for hd in 0..n_heads {
                for r in hd * dh..(hd + 1) * dh {
                    head_scores[hd] += s.row(r).iter().sum::<f64>();
                }
            }
        }
        {
            let name = format!("layer.{l}.attn.o_proj");
            let s = wanda_scores(ckpt.tensor(&name)?, &stats[&name])?;
            for hd in 0..n_heads {
                for r in 0..s.rows() {
                    head_scores[hd] += s.row(r)[hd * dh..(hd + 1) * dh].iter().sum::<f64>();
                }
            }
        }
        let mut order: Vec<usize> = (0..n_heads).collect();
        order.sort_by(|&a, &b| {
            head_scores[a]
                .partial_cmp(&head_scores[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut pruned: Vec<usize> = order.into_iter().take(drop_n).collect();
        pruned.sort_unstable();
        for &hd in &pruned {
            for t in ["attn.q_proj", "attn.k_proj", "attn.v_proj"] {
                let name = format!("layer.{l}.{t}");
                let w = out.tensors.get_mut(&name).unwrap();
                for r in hd * dh..(hd + 1) * dh {
                    for v in w.row_mut(r) {
                        *v = 0.0;
                    }
                }
            }
            let name = format!("layer.{l}.attn.o_proj");
            let w = out.tensors.get_mut(&name).unwrap();
            for r in 0..w.rows() {
                for c in hd * dh..(hd + 1) * dh {
                    w.set(r, c, 0.0);
                }
            }
        }
        records.push(HeadPruneRecord {
            layer: l,
            head_scores,
            pruned_heads: pruned,
        });
    }
    Ok((out, records))
}

/// Per-layer outcome of an unstructured/n:m pruning pass.
#[derive(Debug, Clone)]
pub struct LayerPruneResult {
    pub mask: PruneMask,
    pub reconstructed: DenseMatrix,
    pub achieved_sparsity: f64,
}

/// Prunes every per-layer linear tensor of the checkpoint in canonical
/// order, returning the rewritten checkpoint and per-layer results.
/// Embedding and unembedding are never touched.
pub fn prune_checkpoint(
    ckpt: &NamedTensorCheckpoint,
    stats: &ActivationStatsMap,
    request: &PruneRequest,
) -> Result<(NamedTensorCheckpoint, BTreeMap<String, LayerPruneResult>)> {
    let mut out = ckpt.clone();
    let mut results = BTreeMap::new();
    for name in ckpt.prunable_names() {
        let w = ckpt.tensor(&name)?;
        let stat = stats.get(&name).ok_or(Error::MissingSinkProfile)?;
        let (mask, wt) = prune_layer(w, stat, request)?;
        let achieved = verify_sparsity(&mask);
        out.tensors.insert(name.clone(), wt.clone());
        results.insert(
            name,
            LayerPruneResult {
                mask,
                reconstructed: wt,
                achieved_sparsity: achieved,
            },
        );
    }
    Ok((out, results))
}
