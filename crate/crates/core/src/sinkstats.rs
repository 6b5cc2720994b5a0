//! Attention-sink statistics: per-position attention mass, hard and soft
//! sink detection, step-averaged sink scores, spatial/temporal variance,
//! and sink-profile construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{AttentionTrace, StepAttention};
use crate::{DenseMatrix, Error, Result};

/// How per-matrix masses are normalized before aggregation.
///
/// `SumOverQueries` leaves column sums as-is (total mass S per matrix);
/// `MeanOverQueries` divides by S (total mass 1 per matrix). The two
/// differ only by the factor S.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    SumOverQueries,
    MeanOverQueries,
}

/// Per-step aggregated attention-mass vectors.
#[derive(Debug, Clone)]
pub struct MassSeries {
    pub masses: Vec<Vec<f64>>,
    pub aggregation: Aggregation,
}

impl MassSeries {
    pub fn from_trace(trace: &AttentionTrace, aggregation: Aggregation) -> Result<Self> {
        let masses = trace
            .steps
            .iter()
            .map(|step| aggregate_mass(step, aggregation))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { masses, aggregation })
    }
}

/// Per-position soft sink scores and the derived down-weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinkProfile {
    pub epsilon: f64,
    pub tau: f64,
    /// Zero-based step indices the profile was averaged over.
    pub timesteps: Vec<usize>,
    pub phi_bar: Vec<f64>,
    pub omega: Vec<f64>,
}

impl SinkProfile {
    /// A profile of all-ones down-weights (no suppression).
    pub fn uniform(len: usize) -> Self {
        Self {
            epsilon: 0.0,
            tau: 1.0,
            timesteps: vec![0],
            phi_bar: vec![0.0; len],
            omega: vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub spatial: f64,
    pub temporal: f64,
    pub centroids: Vec<f64>,
    pub sink_sets: Vec<Vec<usize>>,
}

/// Default sigmoid temperature: the per-position mean mass L·H/S, so soft
/// scores stay scale-comparable across model sizes.
pub fn default_tau(n_layers: usize, n_heads: usize, seq_len: usize) -> f64 {
    (n_layers * n_heads) as f64 / seq_len as f64
}

/// Default detection threshold: half the per-position mean mass.
pub fn default_epsilon(n_layers: usize, n_heads: usize, seq_len: usize) -> f64 {
    0.5 * default_tau(n_layers, n_heads, seq_len)
}

fn check_row_stochastic(a: &DenseMatrix) -> Result<()> {
    for i in 0..a.rows() {
        let sum: f64 = a.row(i).iter().sum();
        if libm::fabs(sum - 1.0) > 1e-5 {
            return Err(Error::NotRowStochastic { row: i, sum });
        }
    }
    Ok(())
}

/// Column sums: total attention directed at each position.
pub fn incoming_mass(a: &DenseMatrix) -> Result<Vec<f64>> {
    check_row_stochastic(a)?;
    let s = a.cols();
    let mut m = vec![0.0; s];
    for i in 0..a.rows() {
        for (j, &v) in a.row(i).iter().enumerate() {
            m[j] += v;
        }
    }
    Ok(m)
}

/// Column means: incoming mass divided by the sequence length.
pub fn cumulative_attention(a: &DenseMatrix) -> Result<Vec<f64>> {
    let s = a.rows() as f64;
    let mut m = incoming_mass(a)?;
    for v in &mut m {
        *v /= s;
    }
    Ok(m)
}

/// Sums per-matrix masses over every layer and head at one step.
pub fn aggregate_mass(step: &StepAttention, aggregation: Aggregation) -> Result<Vec<f64>> {
    let first = step
        .first()
        .and_then(|l| l.first())
        .ok_or(Error::ShapeMismatch {
            context: format!("empty step"),
        })?;
    let s = first.cols();
    let mut total = vec![0.0; s];
    for layer in step {
        for a in layer {
            if a.cols() != s {
                return Err(Error::ShapeMismatch {
                    context: format!("attention width {} vs {}", a.cols(), s),
                });
            }
            let m = match aggregation {
                Aggregation::SumOverQueries => incoming_mass(a)?,
                Aggregation::MeanOverQueries => cumulative_attention(a)?,
            };
            for (t, v) in total.iter_mut().zip(m) {
                *t += v;
            }
        }
    }
    Ok(total)
}

/// Hard sink criterion: position j is a sink when its mass exceeds the
/// mean of the others by more than epsilon (strict inequality).
pub fn detect_sinks(masses: &[f64], epsilon: f64) -> Result<Vec<usize>> {
    let s = masses.len();
    if s < 2 {
        return Err(Error::DegenerateSequence);
    }
    let total: f64 = masses.iter().sum();
    Ok((0..s)
        .filter(|&j| {
            let others_mean = (total - masses[j]) / (s as f64 - 1.0);
            masses[j] > others_mean + epsilon
        })
        .collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Sigmoid relaxation of the hard criterion, with temperature tau.
pub fn soft_sink_score(masses: &[f64], epsilon: f64, tau: f64) -> Result<Vec<f64>> {
    let s = masses.len();
    if s < 2 {
        return Err(Error::DegenerateSequence);
    }
    let total: f64 = masses.iter().sum();
    Ok((0..s)
        .map(|j| {
            let others_mean = (total - masses[j]) / (s as f64 - 1.0);
            sigmoid((masses[j] - others_mean - epsilon) / tau)
        })
        .collect())
}

/// Elementwise mean of per-step score vectors.
pub fn average_sink_score(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = scores.first().ok_or(Error::EmptyTimestepSet)?;
    let s = first.len();
    let mut avg = vec![0.0; s];
    for phi in scores {
        if phi.len() != s {
            return Err(Error::ShapeMismatch {
                context: format!("score length {} vs {}", phi.len(), s),
            });
        }
        for (a, v) in avg.iter_mut().zip(phi) {
            *a += v;
        }
    }
    let n = scores.len() as f64;
    for a in &mut avg {
        *a /= n;
    }
    Ok(avg)
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Variance over positions of the time-averaged mass.
pub fn spatial_variance(series: &MassSeries) -> Result<f64> {
    let first = series.masses.first().ok_or(Error::EmptyTimestepSet)?;
    if first.len() < 2 {
        return Err(Error::DegenerateSequence);
    }
    let s = first.len();
    let mut mean_mass = vec![0.0; s];
    for m in &series.masses {
        if m.len() != s {
            return Err(Error::ShapeMismatch {
                context: format!("mass length {} vs {}", m.len(), s),
            });
        }
        for (a, v) in mean_mass.iter_mut().zip(m) {
            *a += v;
        }
    }
    let t = series.masses.len() as f64;
    for a in &mut mean_mass {
        *a /= t;
    }
    Ok(population_variance(&mean_mass))
}

/// Per-step sink sets and centroids, and the variance of the centroid
/// trajectory. An empty sink set falls back to the argmax position
/// (lowest index on ties).
pub fn temporal_variance(series: &MassSeries, epsilon: f64) -> Result<VarianceReport> {
    if series.masses.is_empty() {
        return Err(Error::EmptyTimestepSet);
    }
    let mut centroids = Vec::with_capacity(series.masses.len());
    let mut sink_sets = Vec::with_capacity(series.masses.len());
    for m in &series.masses {
        let sinks = detect_sinks(m, epsilon)?;
        let c = if sinks.is_empty() {
            let mut best = 0usize;
            for (i, &v) in m.iter().enumerate() {
                if v > m[best] {
                    best = i;
                }
            }
            best as f64
        } else {
            let num: f64 = sinks.iter().map(|&i| m[i] * i as f64).sum();
            let den: f64 = sinks.iter().map(|&i| m[i]).sum();
            num / den
        };
        centroids.push(c);
        sink_sets.push(sinks);
    }
    Ok(VarianceReport {
        spatial: spatial_variance(series)?,
        temporal: population_variance(&centroids),
        centroids,
        sink_sets,
    })
}

/// Builds a sink profile from calibration traces: soft scores from
/// mean-over-queries aggregated mass at each selected step, averaged over
/// steps and sequences, with omega = 1 − phi_bar.
pub fn build_sink_profile(
    traces: &[AttentionTrace],
    timesteps: &[usize],
    epsilon: f64,
    tau: f64,
) -> Result<SinkProfile> {
    if timesteps.is_empty() || traces.is_empty() {
        return Err(Error::EmptyTimestepSet);
    }
    let mut scores: Vec<Vec<f64>> = Vec::new();
    let mut seq_len: Option<usize> = None;
    for trace in traces {
        for &t in timesteps {
            let step = trace.steps.get(t).ok_or(Error::ShapeMismatch {
                context: format!("timestep {t} out of range for trace of {}", trace.len()),
            })?;
            let m = aggregate_mass(step, Aggregation::MeanOverQueries)?;
            match seq_len {
                None => seq_len = Some(m.len()),
                Some(s) if s != m.len() => return Err(Error::MixedSequenceLengths),
                _ => {}
            }
            scores.push(soft_sink_score(&m, epsilon, tau)?);
        }
    }
    let phi_bar = average_sink_score(&scores)?;
    let omega = phi_bar.iter().map(|p| 1.0 - p).collect();
    Ok(SinkProfile {
        epsilon,
        tau,
        timesteps: timesteps.into(),
        phi_bar,
        omega,
    })
}
