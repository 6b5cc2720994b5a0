//! Subcommand driver: gen-model, analyze, prune, eval, report.
//!
//! All randomness flows from three named seeds (model, calibration,
//! evaluation); every run echoes them in its report. Outputs are
//! deterministic and idempotent: re-running a subcommand overwrites its
//! artifacts with identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sinkprune_core::calib::{
    collect_activations, collect_calibration_traces, sample_calibration, ActivationStatsMap,
    CalibrationSet, Corpus, TokenizerMode,
};
use sinkprune_core::eval::{
    global_sparsity, masked_accuracy, next_token_accuracy, next_token_perplexity,
    pseudo_perplexity, reconstruction_error, EvalReport,
};
use sinkprune_core::model::{init_random_model, Mode, ModelConfig};
use sinkprune_core::prune::{
    prune_checkpoint, structured_head_prune, Criterion, Pattern, PruneRequest,
};
use sinkprune_core::sinkstats::{
    build_sink_profile, default_epsilon, default_tau, incoming_mass, spatial_variance,
    temporal_variance, Aggregation, MassSeries, SinkProfile, VarianceReport,
};
use sinkprune_core::synthetic::{generate_trace, SyntheticKind};

use crate::io::{read_checkpoint, write_checkpoint, write_csv, write_report};
use crate::report::{LayerSummary, PruneReport, RunEcho, Seeds, TOOL_VERSION};

#[derive(Debug, Parser)]
#[command(name = "sinkprune", version, about = "Sink-aware pruning for toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Initialize a seeded random checkpoint.
    GenModel(GenModelArgs),
    /// Measure attention-sink statistics and emit CSV/JSON artifacts.
    Analyze(AnalyzeArgs),
    /// Prune a checkpoint and emit the pruned weights plus a report.
    Prune(PruneArgs),
    /// Evaluate a checkpoint and append metrics to an existing report.
    Eval(EvalArgs),
    /// Render a report as a text summary table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// Model mode: ar | dlm
    #[arg(long, default_value = "dlm")]
    pub mode: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long = "d-model", default_value_t = 16)]
    pub d_model: usize,
    #[arg(long = "d-ff", default_value_t = 32)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 300)]
    pub vocab: u32,
    #[arg(long = "max-seq-len", default_value_t = 64)]
    pub max_seq_len: usize,
    #[arg(long = "seed-model", default_value_t = 0)]
    pub seed_model: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Checkpoint to trace (required unless --synthetic-traces is set).
    #[arg(long, conflicts_with = "synthetic_traces")]
    pub ckpt: Option<PathBuf>,
    /// Plain-text corpus (blank-line separated documents).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Scripted trace generator: stationary | drifting | uniform
    #[arg(long = "synthetic-traces")]
    pub synthetic_traces: Option<String>,
    #[arg(long = "calib-n", default_value_t = 1)]
    pub calib_n: usize,
    #[arg(long = "calib-len", default_value_t = 16)]
    pub calib_len: usize,
    #[arg(long = "seed-calib", default_value_t = 1)]
    pub seed_calib: u64,
    /// Number of diffusion timesteps to probe.
    #[arg(long, default_value_t = 4)]
    pub tsteps: usize,
    /// Total diffusion steps T.
    #[arg(long = "total-steps", default_value_t = 8)]
    pub total_steps: usize,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional config file (JSON); flags override any field set here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub criterion: Option<String>,
    pub sink_aware: Option<bool>,
    pub force_omega_one: Option<bool>,
    pub sparsity: Option<f64>,
    pub pattern: Option<String>,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
    pub tsteps: Option<usize>,
    pub total_steps: Option<usize>,
    pub calib_n: Option<usize>,
    pub calib_len: Option<usize>,
    pub seed_calib: Option<u64>,
    pub lambda_rel: Option<f64>,
    pub blocksize: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON config file providing defaults; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// magnitude | wanda | sparsegpt
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long = "sink-aware")]
    pub sink_aware: bool,
    /// Force the sink down-weights to 1 (baseline-reduction override).
    #[arg(long = "force-omega-one")]
    pub force_omega_one: bool,
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// rowwise | nm:N:M | heads:R
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tsteps: Option<usize>,
    #[arg(long = "total-steps")]
    pub total_steps: Option<usize>,
    #[arg(long = "calib-n")]
    pub calib_n: Option<usize>,
    #[arg(long = "calib-len")]
    pub calib_len: Option<usize>,
    #[arg(long = "seed-calib")]
    pub seed_calib: Option<u64>,
    #[arg(long = "lambda-rel")]
    pub lambda_rel: Option<f64>,
    #[arg(long)]
    pub blocksize: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// report.json produced by `prune`; metrics are appended in place.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long = "eval-n", default_value_t = 8)]
    pub eval_n: usize,
    #[arg(long = "eval-len")]
    pub eval_len: Option<usize>,
    #[arg(long = "seed-eval", default_value_t = 2)]
    pub seed_eval: u64,
    #[arg(long = "mask-ratio", default_value_t = 0.5)]
    pub mask_ratio: f64,
    #[arg(long = "positions-per-seq", default_value_t = 4)]
    pub positions_per_seq: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// When set, also writes summary.txt into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenModel(a) => gen_model(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Prune(a) => prune(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Report(a) => report(a),
    }
}

fn parse_mode(s: &str) -> anyhow::Result<Mode> {
    match s {
        "ar" => Ok(Mode::Autoregressive),
        "dlm" => Ok(Mode::MaskedDiffusion),
        other => bail!("ConfigConflict: unknown mode {other:?} (expected ar|dlm)"),
    }
}

fn parse_criterion(s: &str) -> anyhow::Result<Criterion> {
    match s {
        "magnitude" => Ok(Criterion::Magnitude),
        "wanda" => Ok(Criterion::Wanda),
        "sparsegpt" => Ok(Criterion::Sparsegpt),
        other => bail!("ConfigConflict: unknown criterion {other:?}"),
    }
}

/// Parses `rowwise`, `nm:N:M`, or `heads:R`; the head ratio rides along
/// since it is not part of the core Pattern enum.
fn parse_pattern(s: &str) -> anyhow::Result<(Pattern, Option<f64>)> {
    if s == "rowwise" {
        return Ok((Pattern::UnstructuredPerRow, None));
    }
    if let Some(rest) = s.strip_prefix("nm:") {
        let mut parts = rest.splitn(2, ':');
        let n: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .context("ConfigConflict: bad n:m pattern")?;
        let m: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .context("ConfigConflict: bad n:m pattern")?;
        if n >= m {
            bail!("ConfigConflict: n:m pattern requires n < m, got {n}:{m}");
        }
        return Ok((Pattern::Nm { n, m }, None));
    }
    if let Some(rest) = s.strip_prefix("heads:") {
        let r: f64 = rest
            .parse()
            .context("ConfigConflict: bad head-pruning ratio")?;
        return Ok((Pattern::StructuredHeads, Some(r)));
    }
    bail!("ConfigConflict: unknown pattern {s:?} (expected rowwise|nm:N:M|heads:R)")
}

fn mode_string(mode: Mode) -> &'static str {
    match mode {
        Mode::Autoregressive => "ar",
        Mode::MaskedDiffusion => "dlm",
    }
}

fn criterion_string(c: Criterion) -> &'static str {
    match c {
        Criterion::Magnitude => "magnitude",
        Criterion::Wanda => "wanda",
        Criterion::Sparsegpt => "sparsegpt",
    }
}

/// K timesteps evenly spread over 1..=T: t_i = ceil(i·T/K).
fn select_timesteps(k: usize, total: usize) -> anyhow::Result<Vec<usize>> {
    if k == 0 || total == 0 || k > total {
        bail!("ConfigConflict: need 1 <= tsteps <= total-steps, got {k}/{total}");
    }
    Ok((1..=k).map(|i| (i * total).div_ceil(k)).collect())
}

fn tokenizer_for(vocab: u32) -> TokenizerMode {
    if vocab >= 257 {
        TokenizerMode::Byte
    } else {
        TokenizerMode::WhitespaceHash
    }
}

fn load_corpus(path: &Path, config: &ModelConfig) -> anyhow::Result<Corpus> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(Corpus::from_text(
        &text,
        tokenizer_for(config.vocab_size),
        config.vocab_size,
    )?)
}

fn ensure_out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_model(a: GenModelArgs) -> anyhow::Result<()> {
    let config = ModelConfig {
        mode: parse_mode(&a.mode)?,
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.d_model,
        d_ff: a.d_ff,
        vocab_size: a.vocab,
        max_seq_len: a.max_seq_len,
        seed: a.seed_model,
    };
    let ckpt = init_random_model(&config)?;
    ensure_out_dir(&a.out)?;
    write_checkpoint(&ckpt, &a.out.join("model.ckpt"))?;
    Ok(())
}

/// Formats floats with Rust's shortest round-trip representation so CSV
/// bytes are canonical.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn emit_analysis(
    trace_steps: &[sinkprune_core::model::StepAttention],
    series: &MassSeries,
    epsilon: f64,
    out: &Path,
) -> anyhow::Result<VarianceReport> {
    let mut mass_rows = Vec::new();
    for (t, step) in trace_steps.iter().enumerate() {
        for (l, layer) in step.iter().enumerate() {
            for (h, head) in layer.iter().enumerate() {
                for (pos, m) in incoming_mass(head)?.into_iter().enumerate() {
                    mass_rows.push(vec![
                        t.to_string(),
                        l.to_string(),
                        h.to_string(),
                        pos.to_string(),
                        fmt(m),
                    ]);
                }
            }
        }
    }
    write_csv(
        &["step", "layer", "head", "position", "mass"],
        &mass_rows,
        &out.join("mass.csv"),
    )?;

    let mut variance = temporal_variance(series, epsilon)?;
    variance.spatial = spatial_variance(series)?;
    write_csv(
        &["statistic", "value"],
        &[
            vec!["spatial".into(), fmt(variance.spatial)],
            vec!["temporal".into(), fmt(variance.temporal)],
        ],
        &out.join("variance.csv"),
    )?;
    write_report(&variance, &out.join("variance.json"))?;
    Ok(variance)
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    ensure_out_dir(&a.out)?;
    if let Some(kind_name) = &a.synthetic_traces {
        let kind = SyntheticKind::parse(kind_name)
            .with_context(|| format!("ConfigConflict: unknown synthetic trace {kind_name:?}"))?;
        let trace = generate_trace(kind, a.calib_len, a.total_steps);
        let series = MassSeries::from_trace(&trace, Aggregation::SumOverQueries)?;
        // Synthetic traces are single-layer single-head with total mass S
        // per step, so the threshold lives on an absolute scale.
        let epsilon = a.epsilon.unwrap_or(0.5);
        emit_analysis(&trace.steps, &series, epsilon, &a.out)?;
        return Ok(());
    }

    let ckpt_path = a
        .ckpt
        .context("ConfigConflict: analyze needs --ckpt or --synthetic-traces")?;
    let corpus_path = a
        .corpus
        .context("ConfigConflict: analyze with --ckpt needs --corpus")?;
    let ckpt = read_checkpoint(&ckpt_path)?;
    let corpus = load_corpus(&corpus_path, &ckpt.config)?;
    let calib = sample_calibration(&corpus, a.calib_n, a.calib_len, a.seed_calib)?;
    let timesteps = match ckpt.config.mode {
        Mode::MaskedDiffusion => select_timesteps(a.tsteps, a.total_steps)?,
        Mode::Autoregressive => vec![1],
    };
    let traces = collect_calibration_traces(&ckpt, &calib, &timesteps, a.total_steps)?;
    let trace = traces.first().context("ConfigConflict: calib-n must be > 0")?;
    let series = MassSeries::from_trace(trace, Aggregation::SumOverQueries)?;
    let epsilon = a.epsilon.unwrap_or_else(|| {
        default_epsilon(ckpt.config.n_layers, ckpt.config.n_heads, a.calib_len)
            * a.calib_len as f64
    });
    emit_analysis(&trace.steps, &series, epsilon, &a.out)?;
    Ok(())
}

/// Everything a prune run needs after flag/file merging.
struct ResolvedPrune {
    criterion: Criterion,
    sink_aware: bool,
    force_omega_one: bool,
    sparsity: f64,
    pattern: Pattern,
    head_ratio: Option<f64>,
    pattern_str: String,
    epsilon: Option<f64>,
    tau: Option<f64>,
    tsteps: usize,
    total_steps: usize,
    calib_n: usize,
    calib_len: usize,
    seed_calib: u64,
    lambda_rel: f64,
    blocksize: usize,
}

fn resolve_prune(a: &PruneArgs) -> anyhow::Result<ResolvedPrune> {
    let file: FileConfig = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("ConfigConflict: invalid config file")?
        }
        None => FileConfig::default(),
    };
    let criterion_str = a
        .criterion
        .clone()
        .or(file.criterion)
        .unwrap_or_else(|| "wanda".to_string());
    let pattern_str = a
        .pattern
        .clone()
        .or(file.pattern)
        .unwrap_or_else(|| "rowwise".to_string());
    let (pattern, head_ratio) = parse_pattern(&pattern_str)?;
    let sparsity = a.sparsity.or(file.sparsity).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&sparsity) {
        bail!("ConfigConflict: sparsity {sparsity} outside [0,1]");
    }
    Ok(ResolvedPrune {
        criterion: parse_criterion(&criterion_str)?,
        sink_aware: a.sink_aware || file.sink_aware.unwrap_or(false),
        force_omega_one: a.force_omega_one || file.force_omega_one.unwrap_or(false),
        sparsity,
        pattern,
        head_ratio,
        pattern_str,
        epsilon: a.epsilon.or(file.epsilon),
        tau: a.tau.or(file.tau),
        tsteps: a.tsteps.or(file.tsteps).unwrap_or(4),
        total_steps: a.total_steps.or(file.total_steps).unwrap_or(8),
        calib_n: a.calib_n.or(file.calib_n).unwrap_or(8),
        calib_len: a.calib_len.or(file.calib_len).unwrap_or(16),
        seed_calib: a.seed_calib.or(file.seed_calib).unwrap_or(1),
        lambda_rel: a.lambda_rel.or(file.lambda_rel).unwrap_or(0.01),
        blocksize: a.blocksize.or(file.blocksize).unwrap_or(32),
    })
}

fn prune(a: PruneArgs) -> anyhow::Result<()> {
    let r = resolve_prune(&a)?;
    let ckpt = read_checkpoint(&a.ckpt)?;
    let cfg = ckpt.config.clone();
    let corpus = load_corpus(&a.corpus, &cfg)?;
    let calib = sample_calibration(&corpus, r.calib_n, r.calib_len, r.seed_calib)?;
    let timesteps = match cfg.mode {
        Mode::MaskedDiffusion => select_timesteps(r.tsteps, r.total_steps)?,
        Mode::Autoregressive => vec![1],
    };
    let epsilon = r
        .epsilon
        .unwrap_or_else(|| default_epsilon(cfg.n_layers, cfg.n_heads, r.calib_len));
    let tau = r
        .tau
        .unwrap_or_else(|| default_tau(cfg.n_layers, cfg.n_heads, r.calib_len));

    // With omega forced to 1 the pipeline is exactly the baseline, so the
    // report is normalized to the baseline configuration; the uniform
    // profile still flows through the sink-aware weighting path.
    let effective_sink_aware = r.sink_aware && !r.force_omega_one;
    let (profile, variance): (Option<SinkProfile>, Option<VarianceReport>) =
        if effective_sink_aware {
            let traces = collect_calibration_traces(&ckpt, &calib, &timesteps, r.total_steps)?;
            let step_indices: Vec<usize> = (0..timesteps.len()).collect();
            let profile = build_sink_profile(&traces, &step_indices, epsilon, tau)?;
            let series = MassSeries::from_trace(&traces[0], Aggregation::SumOverQueries)?;
            let mut variance = temporal_variance(&series, epsilon * r.calib_len as f64)?;
            variance.spatial = spatial_variance(&series)?;
            (Some(profile), Some(variance))
        } else if r.sink_aware {
            (Some(SinkProfile::uniform(r.calib_len)), None)
        } else {
            (None, None)
        };

    let stats = collect_activations(
        &ckpt,
        &calib,
        &timesteps,
        r.total_steps,
        profile.as_ref(),
    )?;
    // Reconstruction error is always measured against unweighted
    // statistics; only the sink-aware down-weighted run needs a second
    // clean pass.
    let clean_stats: ActivationStatsMap = if effective_sink_aware {
        collect_activations(&ckpt, &calib, &timesteps, r.total_steps, None)?
    } else {
        stats.clone()
    };

    let request = PruneRequest {
        criterion: r.criterion,
        sink_aware: effective_sink_aware,
        sparsity: r.sparsity,
        pattern: r.pattern,
        lambda_rel: r.lambda_rel,
        blocksize: r.blocksize,
    };

    let (pruned, layers, head_records) = match r.pattern {
        Pattern::StructuredHeads => {
            let ratio = r.head_ratio.unwrap();
            let (pruned, records) = structured_head_prune(&ckpt, &stats, ratio)?;
            let mut layers = BTreeMap::new();
            for name in ckpt.prunable_names() {
                let w = ckpt.tensor(&name)?;
                let wt = pruned.tensor(&name)?;
                let zeros = wt.data().iter().filter(|&&v| v == 0.0).count();
                layers.insert(
                    name.clone(),
                    LayerSummary {
                        achieved_sparsity: zeros as f64 / wt.data().len() as f64,
                        recon_error: reconstruction_error(w, wt, &clean_stats[&name])?,
                    },
                );
            }
            (pruned, layers, Some(records))
        }
        _ => {
            let (pruned, results) = prune_checkpoint(&ckpt, &stats, &request)?;
            let mut layers = BTreeMap::new();
            for (name, res) in &results {
                layers.insert(
                    name.clone(),
                    LayerSummary {
                        achieved_sparsity: res.achieved_sparsity,
                        recon_error: reconstruction_error(
                            ckpt.tensor(name)?,
                            &res.reconstructed,
                            &clean_stats[name.as_str()],
                        )?,
                    },
                );
            }
            (pruned, layers, None)
        }
    };

    let report = PruneReport {
        tool_version: TOOL_VERSION.to_string(),
        run: RunEcho {
            mode: mode_string(cfg.mode).to_string(),
            criterion: criterion_string(r.criterion).to_string(),
            sink_aware: effective_sink_aware,
            force_omega_one: false,
            sparsity: r.sparsity,
            pattern: r.pattern_str.clone(),
            epsilon,
            tau,
            timesteps: timesteps.clone(),
            total_steps: r.total_steps,
            calib_n: r.calib_n,
            calib_len: r.calib_len,
            lambda_rel: r.lambda_rel,
            blocksize: r.blocksize,
        },
        seeds: Seeds {
            model: cfg.seed,
            calib: r.seed_calib,
            eval: None,
        },
        layers,
        global_sparsity: global_sparsity(&pruned),
        sink_profile: if effective_sink_aware { profile } else { None },
        head_pruning: head_records,
        variance,
        eval: None,
    };

    ensure_out_dir(&a.out)?;
    write_checkpoint(&pruned, &a.out.join("pruned.ckpt"))?;
    write_report(&report, &a.out.join("report.json"))?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.report)
        .with_context(|| format!("reading report {}", a.report.display()))?;
    let mut report: PruneReport =
        serde_json::from_str(&text).context("ConfigConflict: invalid report file")?;
    let ckpt = read_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus, &ckpt.config)?;
    let eval_len = a.eval_len.unwrap_or(report.run.calib_len);
    let eval_set: CalibrationSet =
        sample_calibration(&corpus, a.eval_n, eval_len, a.seed_eval)?;

    let (accuracy, perplexity) = match ckpt.config.mode {
        Mode::MaskedDiffusion => (
            masked_accuracy(&ckpt, &eval_set, a.mask_ratio, a.seed_eval)?,
            pseudo_perplexity(&ckpt, &eval_set, a.positions_per_seq, a.seed_eval)?,
        ),
        Mode::Autoregressive => (
            next_token_accuracy(&ckpt, &eval_set)?,
            next_token_perplexity(&ckpt, &eval_set)?,
        ),
    };
    let recon: BTreeMap<String, f64> = report
        .layers
        .iter()
        .map(|(name, s)| (name.clone(), s.recon_error))
        .collect();
    report.eval = Some(EvalReport {
        recon_error: recon,
        masked_accuracy: accuracy,
        pseudo_perplexity: perplexity,
        global_sparsity: global_sparsity(&ckpt),
    });
    report.seeds.eval = Some(a.seed_eval);
    write_report(&report, &a.report)?;
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.report)
        .with_context(|| format!("reading report {}", a.report.display()))?;
    let report: PruneReport =
        serde_json::from_str(&text).context("ConfigConflict: invalid report file")?;
    let summary = crate::report::render_summary(&report);
    if let Some(out) = &a.out {
        ensure_out_dir(out)?;
        fs::write(out.join("summary.txt"), &summary)?;
    }
    print!("{summary}");
    Ok(())
}
