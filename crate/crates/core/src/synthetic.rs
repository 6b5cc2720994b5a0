//! Scripted attention-trace generators for exercising the sink-statistics
//! pipeline without running a model: stationary sink, drifting sink, and
//! uniform attention.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::AttentionTrace;
use crate::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// A single sink fixed at position 0 across all steps (AR-like).
    StationarySink,
    /// A sink that migrates from position 0 to the last position (DLM-like).
    DriftingSink,
    /// Uniform attention, no sink at all.
    Uniform,
}

impl SyntheticKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "stationary" => Some(Self::StationarySink),
            "drifting" => Some(Self::DriftingSink),
            "uniform" => Some(Self::Uniform),
            _ => None,
        }
    }
}

/// One row-stochastic matrix that concentrates `weight` on `sink` and
/// spreads the remainder uniformly.
fn sink_matrix(seq_len: usize, sink: usize, weight: f64) -> DenseMatrix {
    let rest = (1.0 - weight) / seq_len as f64;
    let mut a = DenseMatrix::zeros(seq_len, seq_len);
    for i in 0..seq_len {
        let row = a.row_mut(i);
        for v in row.iter_mut() {
            *v = rest;
        }
        row[sink] += weight;
    }
    a
}

/// Generates a trace of `steps` single-layer single-head snapshots.
pub fn generate_trace(kind: SyntheticKind, seq_len: usize, steps: usize) -> AttentionTrace {
    let weight = 0.8;
    let snapshots = (0..steps)
        .map(|t| {
            let a = match kind {
                SyntheticKind::StationarySink => sink_matrix(seq_len, 0, weight),
                SyntheticKind::DriftingSink => {
                    let sink = if steps > 1 {
                        t * (seq_len - 1) / (steps - 1)
                    } else {
                        0
                    };
                    sink_matrix(seq_len, sink, weight)
                }
                SyntheticKind::Uniform => {
                    DenseMatrix::new(seq_len, seq_len, vec![1.0 / seq_len as f64; seq_len * seq_len])
                        .unwrap()
                }
            };
            vec![vec![a]]
        })
        .collect();
    AttentionTrace {
        steps: snapshots,
        sequences: Vec::new(),
    }
}
