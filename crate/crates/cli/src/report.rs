//! The on-disk prune report and its text rendering.
//!
//! Serialization goes through serde_json with alphabetically sorted keys,
//! so identical runs produce identical bytes. Optional sections are
//! omitted entirely rather than serialized as null (the finiteness gate
//! in [`crate::io`] treats null as a smuggled NaN).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sinkprune_core::eval::EvalReport;
use sinkprune_core::prune::HeadPruneRecord;
use sinkprune_core::sinkstats::{SinkProfile, VarianceReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Echo of every knob that influenced a prune run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEcho {
    pub mode: String,
    pub criterion: String,
    pub sink_aware: bool,
    pub force_omega_one: bool,
    pub sparsity: f64,
    pub pattern: String,
    pub epsilon: f64,
    pub tau: f64,
    pub timesteps: Vec<usize>,
    pub total_steps: usize,
    pub calib_n: usize,
    pub calib_len: usize,
    pub lambda_rel: f64,
    pub blocksize: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub calib: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerSummary {
    pub achieved_sparsity: f64,
    pub recon_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub tool_version: String,
    pub run: RunEcho,
    pub seeds: Seeds,
    pub layers: BTreeMap<String, LayerSummary>,
    pub global_sparsity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink_profile: Option<SinkProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_pruning: Option<Vec<HeadPruneRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

/// Renders the report as a fixed-width text summary table.
pub fn render_summary(report: &PruneReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("sinkprune v{}\n", report.tool_version));
    out.push_str(&format!(
        "mode={} criterion={} sink_aware={} sparsity={} pattern={}\n",
        report.run.mode,
        report.run.criterion,
        report.run.sink_aware,
        report.run.sparsity,
        report.run.pattern
    ));
    out.push_str(&format!(
        "seeds: model={} calib={} eval={}\n\n",
        report.seeds.model,
        report.seeds.calib,
        report
            .seeds
            .eval
            .map_or_else(|| "-".to_string(), |s| s.to_string())
    ));
    out.push_str(&format!(
        "{:<28} {:>10} {:>14}\n",
        "layer", "sparsity", "recon_error"
    ));
    for (name, s) in &report.layers {
        out.push_str(&format!(
            "{:<28} {:>10.4} {:>14.6e}\n",
            name, s.achieved_sparsity, s.recon_error
        ));
    }
    out.push_str(&format!(
        "{:<28} {:>10.4}\n",
        "(global)", report.global_sparsity
    ));
    if let Some(profile) = &report.sink_profile {
        let max_phi = profile.phi_bar.iter().cloned().fold(0.0_f64, f64::max);
        let min_omega = profile.omega.iter().cloned().fold(f64::INFINITY, f64::min);
        out.push_str(&format!(
            "\nsink profile: eps={} tau={} max_phi_bar={:.4} min_omega={:.4}\n",
            profile.epsilon, profile.tau, max_phi, min_omega
        ));
    }
    if let Some(v) = &report.variance {
        out.push_str(&format!(
            "variance: spatial={:.6e} temporal={:.6e}\n",
            v.spatial, v.temporal
        ));
    }
    if let Some(records) = &report.head_pruning {
        out.push_str("\nhead pruning:\n");
        for r in records {
            out.push_str(&format!("  layer {}: pruned {:?}\n", r.layer, r.pruned_heads));
        }
    }
    if let Some(e) = &report.eval {
        out.push_str(&format!(
            "\neval: accuracy={:.4} perplexity={:.4} global_sparsity={:.4}\n",
            e.masked_accuracy, e.pseudo_perplexity, e.global_sparsity
        ));
    }
    out
}
