//! Acceptance gate: every release criterion, one pass/fail line each.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines on success; failures surface through the harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sinkprune_core::calib::{collect_activations, CalibrationSet, LayerActivationStats};
use sinkprune_core::eval::reconstruction_error;
use sinkprune_core::model::{
    decode_ar, denoise_diffusion, forward, init_random_model, CaptureFlags, Mode, ModelConfig,
    UnmaskSchedule,
};
use sinkprune_core::numerics::cholesky;
use sinkprune_core::prune::{
    magnitude_scores, prune_checkpoint, select_mask, sparsegpt_prune, structured_head_prune,
    wanda_scores, Criterion, Pattern, PruneRequest,
};
use sinkprune_core::sinkstats::{
    aggregate_mass, cumulative_attention, incoming_mass, soft_sink_score, spatial_variance,
    temporal_variance, Aggregation, MassSeries, SinkProfile,
};
use sinkprune_core::DenseMatrix;

fn pass(name: &str) {
    println!("acceptance: {name} PASS");
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_row_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        let row = a.row_mut(i);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = rng.gen_range(0.01..1.0);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    a
}

/// Builds activation statistics from one explicit sample matrix X (rows =
/// samples, cols = features), mirroring what collect_activations does.
fn stats_from_x(x: &DenseMatrix) -> LayerActivationStats {
    let c = x.cols();
    let mut st = LayerActivationStats::new(c);
    for i in 0..c {
        for j in 0..c {
            let mut g = 0.0;
            for r in 0..x.rows() {
                g += x.get(r, i) * x.get(r, j);
            }
            st.hessian_acc.set(i, j, g);
        }
        st.column_sq_norms[i] = st.hessian_acc.get(i, i);
    }
    st.sample_count = 1;
    st
}

fn identity_stats(c: usize) -> LayerActivationStats {
    let mut st = LayerActivationStats::new(c);
    st.hessian_acc = DenseMatrix::identity(c);
    st.column_sq_norms = vec![1.0; c];
    st.sample_count = 1;
    st
}

/// Independent re-derivation of H_damp = acc/count + 0.01·mean(diag)·I.
fn oracle_dampened(stats: &LayerActivationStats, lambda_rel: f64) -> DenseMatrix {
    let c = stats.c_in();
    let count = stats.sample_count.max(1) as f64;
    let mut h = stats.hessian_acc.clone();
    h.scale(1.0 / count);
    let lambda = lambda_rel * (0..c).map(|i| h.get(i, i)).sum::<f64>() / c as f64;
    for i in 0..c {
        h.set(i, i, h.get(i, i) + lambda);
    }
    h
}

// ---------------------------------------------------------------------
// Criterion: formula oracles (>= 100 random inputs, 1e-9 relative, <10s)
// ---------------------------------------------------------------------
#[test]
fn formula_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    for _ in 0..100 {
        // wanda: s_ij = |w_ij| * sqrt(column_sq_norms_j)
        let rows = rng.gen_range(2..6);
        let cols = rng.gen_range(2..8);
        let w = random_matrix(&mut rng, rows, cols);
        let mut st = LayerActivationStats::new(cols);
        for v in &mut st.column_sq_norms {
            *v = rng.gen_range(0.01..4.0);
        }
        st.sample_count = 1;
        let s = wanda_scores(&w, &st).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let expect = w.get(r, c).abs() * st.column_sq_norms[c].sqrt();
                assert!(close(s.get(r, c), expect, 1e-9), "wanda");
            }
        }

        // incoming mass / cumulative attention: explicit column sums
        let n = rng.gen_range(2..10);
        let a = random_row_stochastic(&mut rng, n, n);
        let m = incoming_mass(&a).unwrap();
        let cum = cumulative_attention(&a).unwrap();
        for j in 0..n {
            let mut col = 0.0;
            for i in 0..n {
                col += a.get(i, j);
            }
            assert!(close(m[j], col, 1e-9), "incoming_mass");
            assert!(close(cum[j], col / n as f64, 1e-9), "cumulative_attention");
        }

        // aggregate mass over layers x heads
        let layers = rng.gen_range(1..4);
        let heads = rng.gen_range(1..4);
        let step: Vec<Vec<DenseMatrix>> = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| random_row_stochastic(&mut rng, n, n))
                    .collect()
            })
            .collect();
        for (agg, div) in [
            (Aggregation::SumOverQueries, 1.0),
            (Aggregation::MeanOverQueries, n as f64),
        ] {
            let got = aggregate_mass(&step, agg).unwrap();
            for j in 0..n {
                let mut total = 0.0;
                for layer in &step {
                    for h in layer {
                        for i in 0..n {
                            total += h.get(i, j);
                        }
                    }
                }
                assert!(close(got[j], total / div, 1e-9), "aggregate_mass");
            }
        }

        // soft sink score: sigmoid((m_j - mean_others - eps) / tau)
        let masses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let eps = rng.gen_range(0.0..1.0);
        let tau = rng.gen_range(0.1..2.0);
        let phi = soft_sink_score(&masses, eps, tau).unwrap();
        let total: f64 = masses.iter().sum();
        for j in 0..n {
            let others = (total - masses[j]) / (n as f64 - 1.0);
            let x = (masses[j] - others - eps) / tau;
            let expect = 1.0 / (1.0 + (-x).exp());
            assert!(close(phi[j], expect, 1e-9), "soft_sink_score");
        }

        // spatial / temporal variance on a random mass series
        let steps = rng.gen_range(2..8);
        let series = MassSeries {
            masses: (0..steps)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..3.0)).collect())
                .collect(),
            aggregation: Aggregation::SumOverQueries,
        };
        let eps = rng.gen_range(0.0..1.0);

        // brute spatial: population variance of time-averaged mass
        let mut avg = vec![0.0; n];
        for m in &series.masses {
            for (a, v) in avg.iter_mut().zip(m) {
                *a += v / steps as f64;
            }
        }
        let mean = avg.iter().sum::<f64>() / n as f64;
        let spatial_expect =
            avg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(
            close(spatial_variance(&series).unwrap(), spatial_expect, 1e-9),
            "spatial_variance"
        );

        // brute temporal: centroid of the hard sink set per step
        let mut centroids = Vec::new();
        for m in &series.masses {
            let total: f64 = m.iter().sum();
            let sinks: Vec<usize> = (0..n)
                .filter(|&j| m[j] > (total - m[j]) / (n as f64 - 1.0) + eps)
                .collect();
            let c = if sinks.is_empty() {
                let mut best = 0;
                for (i, &v) in m.iter().enumerate() {
                    if v > m[best] {
                        best = i;
                    }
                }
                best as f64
            } else {
                sinks.iter().map(|&i| m[i] * i as f64).sum::<f64>()
                    / sinks.iter().map(|&i| m[i]).sum::<f64>()
            };
            centroids.push(c);
        }
        let cmean = centroids.iter().sum::<f64>() / steps as f64;
        let temporal_expect = centroids
            .iter()
            .map(|v| (v - cmean) * (v - cmean))
            .sum::<f64>()
            / steps as f64;
        let rep = temporal_variance(&series, eps).unwrap();
        assert!(close(rep.temporal, temporal_expect, 1e-9), "temporal_variance");
        assert_eq!(rep.centroids, centroids);
    }

    assert!(start.elapsed().as_secs() < 10, "formula oracle runtime");
    pass("formula-oracles");
}

// ---------------------------------------------------------------------
// Criterion: SparseGPT correctness (normal equations, H=I degeneracy,
// dominance over mask-only magnitude)
// ---------------------------------------------------------------------
#[test]
fn sparsegpt_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let request = PruneRequest {
        criterion: Criterion::Sparsegpt,
        sparsity: 0.5,
        blocksize: 16,
        ..Default::default()
    };

    let mut sparsegpt_wins = 0;
    for _ in 0..100 {
        let w = random_matrix(&mut rng, 8, 16);
        let x = random_matrix(&mut rng, 24, 16);
        let stats = stats_from_x(&x);
        let (mask, wt) = sparsegpt_prune(&w, &stats, &request).unwrap();

        // Normal equations: (H_damp)_MM w~_M = (H_raw w)_M per row.
        let h_damp = oracle_dampened(&stats, request.lambda_rel);
        let mut h_raw = stats.hessian_acc.clone();
        h_raw.scale(1.0 / stats.sample_count as f64);
        for r in 0..8 {
            for j in 0..16 {
                if !mask.kept(r, j) {
                    assert_eq!(wt.get(r, j), 0.0);
                    continue;
                }
                let lhs: f64 = (0..16)
                    .filter(|&k| mask.kept(r, k))
                    .map(|k| h_damp.get(j, k) * wt.get(r, k))
                    .sum();
                let rhs: f64 = (0..16).map(|k| h_raw.get(j, k) * w.get(r, k)).sum();
                assert!(
                    (lhs - rhs).abs() <= 1e-4,
                    "normal-equation residual {}",
                    (lhs - rhs).abs()
                );
            }
        }

        // Dominance over mask-only magnitude at the same sparsity.
        let mag_mask = select_mask(&magnitude_scores(&w), 0.5, Pattern::UnstructuredPerRow).unwrap();
        let mut mag_wt = w.clone();
        for r in 0..8 {
            for c in 0..16 {
                if !mag_mask.kept(r, c) {
                    mag_wt.set(r, c, 0.0);
                }
            }
        }
        let e_sgpt = reconstruction_error(&w, &wt, &stats).unwrap();
        let e_mag = reconstruction_error(&w, &mag_wt, &stats).unwrap();
        if e_sgpt <= e_mag {
            sparsegpt_wins += 1;
        }
    }
    assert!(sparsegpt_wins >= 95, "sparsegpt won only {sparsegpt_wins}/100");

    // H = I: the SparseGPT mask degenerates to the magnitude mask.
    for seed in 0..20 {
        let mut r2 = ChaCha8Rng::seed_from_u64(1000 + seed);
        let w = random_matrix(&mut r2, 8, 16);
        let (mask, _) = sparsegpt_prune(&w, &identity_stats(16), &request).unwrap();
        let mag = select_mask(&magnitude_scores(&w), 0.5, Pattern::UnstructuredPerRow).unwrap();
        assert_eq!(mask.keep, mag.keep, "H=I mask mismatch");
    }
    pass("sparsegpt-correctness");
}

// ---------------------------------------------------------------------
// Criterion: exhaustive-mask oracle (C_in = 8, keep 4, 70 masks, <60s)
// ---------------------------------------------------------------------
fn masks_keep4of8() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..8 {
        for b in a + 1..8 {
            for c in b + 1..8 {
                for d in c + 1..8 {
                    out.push(vec![a, b, c, d]);
                }
            }
        }
    }
    out
}

/// Refits a kept set exactly: (H_damp)_MM w_M = (H_raw w)_M.
fn refit(
    w: &DenseMatrix,
    kept: &[usize],
    h_damp: &DenseMatrix,
    h_raw: &DenseMatrix,
) -> DenseMatrix {
    let cols = w.cols();
    let k = kept.len();
    let mut gram = DenseMatrix::zeros(k, k);
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            gram.set(a, b, h_damp.get(i, j));
        }
    }
    let rhs: Vec<f64> = kept
        .iter()
        .map(|&i| (0..cols).map(|j| h_raw.get(i, j) * w.get(0, j)).sum())
        .collect();
    let sol = cholesky(&gram).unwrap().solve(&rhs).unwrap();
    let mut wt = DenseMatrix::zeros(1, cols);
    for (a, &i) in kept.iter().enumerate() {
        wt.set(0, i, sol[a]);
    }
    wt
}

#[test]
fn exhaustive_mask_oracle() {
    let start = Instant::now();
    let masks = masks_keep4of8();
    assert_eq!(masks.len(), 70);
    let request = PruneRequest {
        criterion: Criterion::Sparsegpt,
        sparsity: 0.5,
        blocksize: 8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    for _ in 0..40 {
        let w = random_matrix(&mut rng, 1, 8);
        let x = random_matrix(&mut rng, 16, 8);
        let stats = stats_from_x(&x);
        let h_damp = oracle_dampened(&stats, request.lambda_rel);
        let mut h_raw = stats.hessian_acc.clone();
        h_raw.scale(1.0 / stats.sample_count as f64);

        let (_, wt) = sparsegpt_prune(&w, &stats, &request).unwrap();
        let impl_err = reconstruction_error(&w, &wt, &stats).unwrap();
        let best = masks
            .iter()
            .map(|kept| {
                reconstruction_error(&w, &refit(&w, kept, &h_damp, &h_raw), &stats).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            impl_err <= 1.1 * best + 1e-12,
            "impl {impl_err} vs optimum {best}"
        );
    }

    // H = I: the optimum keeps the 4 largest |w| and the implementation
    // matches it exactly.
    for seed in 0..20 {
        let mut r2 = ChaCha8Rng::seed_from_u64(500 + seed);
        let w = random_matrix(&mut r2, 1, 8);
        let stats = identity_stats(8);
        let h_damp = oracle_dampened(&stats, request.lambda_rel);
        let h_raw = DenseMatrix::identity(8);
        let (_, wt) = sparsegpt_prune(&w, &stats, &request).unwrap();
        let impl_err = reconstruction_error(&w, &wt, &stats).unwrap();
        let best = masks
            .iter()
            .map(|kept| {
                reconstruction_error(&w, &refit(&w, kept, &h_damp, &h_raw), &stats).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((impl_err - best).abs() <= 1e-12, "H=I not exact");
    }

    assert!(start.elapsed().as_secs() < 60, "exhaustive oracle runtime");
    pass("exhaustive-mask-oracle");
}

// ---------------------------------------------------------------------
// CLI helpers for the end-to-end criteria
// ---------------------------------------------------------------------
fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sinkprune")
}

fn run_cli(args: &[&str]) {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_corpus(path: &Path) {
    let words = [
        "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
    ];
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut docs = Vec::new();
    for _ in 0..6 {
        let mut doc = Vec::new();
        for _ in 0..120 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            doc.push(words[(state >> 33) as usize % words.len()]);
        }
        docs.push(doc.join(" "));
    }
    std::fs::write(path, docs.join("\n\n")).unwrap();
}

fn setup_cli(dir: &Path) -> (String, String) {
    write_corpus(&dir.join("corpus.txt"));
    run_cli(&["gen-model", "--out", dir.to_str().unwrap()]);
    (
        dir.join("model.ckpt").to_str().unwrap().to_string(),
        dir.join("corpus.txt").to_str().unwrap().to_string(),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

// ---------------------------------------------------------------------
// Criterion: baseline reduction (omega == 1 reproduces the baseline
// byte-identically through the CLI)
// ---------------------------------------------------------------------
#[test]
fn baseline_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, corpus) = setup_cli(dir.path());
    for criterion in ["wanda", "sparsegpt"] {
        let base = dir.path().join(format!("base-{criterion}"));
        let forced = dir.path().join(format!("forced-{criterion}"));
        run_cli(&[
            "prune", "--ckpt", &ckpt, "--corpus", &corpus, "--criterion", criterion,
            "--sparsity", "0.5", "--out", base.to_str().unwrap(),
        ]);
        run_cli(&[
            "prune", "--ckpt", &ckpt, "--corpus", &corpus, "--criterion", criterion,
            "--sink-aware", "--force-omega-one", "--sparsity", "0.5",
            "--out", forced.to_str().unwrap(),
        ]);
        assert_eq!(
            read(&base.join("pruned.ckpt")),
            read(&forced.join("pruned.ckpt")),
            "{criterion} checkpoint"
        );
        assert_eq!(
            read(&base.join("report.json")),
            read(&forced.join("report.json")),
            "{criterion} report"
        );
    }
    pass("baseline-reduction");
}

// ---------------------------------------------------------------------
// Criterion: row-deletion equivalence (omega zeroing one position equals
// removing that calibration row, within 1e-9 on the accumulators)
// ---------------------------------------------------------------------
#[test]
fn row_deletion_equivalence() {
    let config = ModelConfig {
        mode: Mode::Autoregressive,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 32,
        max_seq_len: 16,
        seed: 11,
    };
    let ckpt = init_random_model(&config).unwrap();
    let seq_len = 12;
    let zeroed = 3usize;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let calib = CalibrationSet {
        sequences: (0..3)
            .map(|_| (0..seq_len).map(|_| rng.gen_range(0..32)).collect())
            .collect(),
        seq_len,
        seed: 0,
    };

    let mut profile = SinkProfile::uniform(seq_len);
    profile.omega[zeroed] = 0.0;
    profile.phi_bar[zeroed] = 1.0;
    let weighted = collect_activations(&ckpt, &calib, &[1], 1, Some(&profile)).unwrap();

    // Oracle: accumulate the same forwards with row `zeroed` deleted.
    let mut oracle: BTreeMap<String, LayerActivationStats> = BTreeMap::new();
    for seq in &calib.sequences {
        let out = forward(&ckpt, seq, CaptureFlags::all()).unwrap();
        for (name, x) in &out.activations.inputs {
            let st = oracle
                .entry(name.clone())
                .or_insert_with(|| LayerActivationStats::new(x.cols()));
            for r in 0..x.rows() {
                if r == zeroed {
                    continue;
                }
                let row = x.row(r);
                for i in 0..x.cols() {
                    st.column_sq_norms[i] += row[i] * row[i];
                    for j in 0..x.cols() {
                        let cur = st.hessian_acc.get(i, j);
                        st.hessian_acc.set(i, j, cur + row[i] * row[j]);
                    }
                }
            }
            st.sample_count += 1;
        }
    }

    for (name, got) in &weighted {
        let want = &oracle[name];
        assert!(
            got.hessian_acc.max_abs_diff(&want.hessian_acc) <= 1e-9,
            "{name} hessian"
        );
        for (a, b) in got.column_sq_norms.iter().zip(&want.column_sq_norms) {
            assert!((a - b).abs() <= 1e-9, "{name} norms");
        }
        assert_eq!(got.sample_count, want.sample_count);
    }
    pass("row-deletion-equivalence");
}

// ---------------------------------------------------------------------
// Criterion: synthetic trace contrast (stationary vs drifting, via the
// emitted variance JSON, <5s)
// ---------------------------------------------------------------------
#[test]
fn synthetic_trace_contrast() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut variance = BTreeMap::new();
    for kind in ["stationary", "drifting"] {
        let out = dir.path().join(kind);
        run_cli(&["analyze", "--synthetic-traces", kind, "--out", out.to_str().unwrap()]);
        let json: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join("variance.json")).unwrap(),
        )
        .unwrap();
        variance.insert(
            kind,
            (
                json["spatial"].as_f64().unwrap(),
                json["temporal"].as_f64().unwrap(),
            ),
        );
    }
    let (spatial_st, temporal_st) = variance["stationary"];
    let (spatial_dr, temporal_dr) = variance["drifting"];
    assert!(temporal_st <= 1e-12, "stationary temporal {temporal_st}");
    assert!(spatial_st > 0.1, "stationary spatial {spatial_st}");
    assert!(
        temporal_dr >= 10.0 * temporal_st.max(1e-13) && temporal_dr > 1.0,
        "drifting temporal {temporal_dr}"
    );
    assert!(spatial_dr < spatial_st, "spatial contrast");
    assert!(start.elapsed().as_secs() < 5, "synthetic contrast runtime");
    pass("synthetic-trace-contrast");
}

// ---------------------------------------------------------------------
// Criterion: sparsity accounting (unstructured ratios, n:m group
// budgets, structured head counts)
// ---------------------------------------------------------------------
#[test]
fn sparsity_accounting() {
    let config = ModelConfig {
        mode: Mode::MaskedDiffusion,
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_ff: 24,
        vocab_size: 32,
        max_seq_len: 16,
        seed: 3,
    };
    let ckpt = init_random_model(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let calib = CalibrationSet {
        sequences: (0..4).map(|_| (0..12).map(|_| rng.gen_range(0..31)).collect()).collect(),
        seq_len: 12,
        seed: 0,
    };
    let stats = collect_activations(&ckpt, &calib, &[1, 2], 4, None).unwrap();

    // Unstructured: floor(C_in * s) zeros in every row.
    for s in [0.25, 0.5, 0.75] {
        let request = PruneRequest {
            sparsity: s,
            ..Default::default()
        };
        let (_, results) = prune_checkpoint(&ckpt, &stats, &request).unwrap();
        for (name, res) in &results {
            let cols = res.mask.cols;
            let expect = ((cols as f64) * s) as usize;
            for r in 0..res.mask.rows {
                let zeros = (0..cols).filter(|&c| !res.mask.kept(r, c)).count();
                assert_eq!(zeros, expect, "{name} row {r} at s={s}");
            }
        }
    }

    // n:m: every aligned group keeps at most n entries.
    for (n, m) in [(2usize, 4usize), (1, 4)] {
        let request = PruneRequest {
            criterion: Criterion::Sparsegpt,
            pattern: Pattern::Nm { n, m },
            ..Default::default()
        };
        let (_, results) = prune_checkpoint(&ckpt, &stats, &request).unwrap();
        for (name, res) in &results {
            for r in 0..res.mask.rows {
                for g in (0..res.mask.cols).step_by(m) {
                    let kept = (g..g + m).filter(|&c| res.mask.kept(r, c)).count();
                    assert!(kept <= n, "{name} row {r} group {g}: {kept} > {n}");
                }
            }
        }
    }

    // Structured: exactly floor(H * r) heads zeroed per layer.
    let dh = config.head_dim();
    for (ratio, expect) in [(0.3, 1usize), (0.5, 2)] {
        let (pruned, records) = structured_head_prune(&ckpt, &stats, ratio).unwrap();
        assert_eq!(records.len(), config.n_layers);
        for rec in &records {
            assert_eq!(rec.pruned_heads.len(), expect, "ratio {ratio}");
            for &hd in &rec.pruned_heads {
                for t in ["attn.q_proj", "attn.k_proj", "attn.v_proj"] {
                    let w = pruned.tensor(&format!("layer.{}.{t}", rec.layer)).unwrap();
                    for r in hd * dh..(hd + 1) * dh {
                        assert!(w.row(r).iter().all(|&v| v == 0.0));
                    }
                }
                let o = pruned
                    .tensor(&format!("layer.{}.attn.o_proj", rec.layer))
                    .unwrap();
                for r in 0..o.rows() {
                    assert!(o.row(r)[hd * dh..(hd + 1) * dh].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
    pass("sparsity-accounting");
}

// ---------------------------------------------------------------------
// Criterion: determinism (two identical full pipeline runs byte-compare)
// ---------------------------------------------------------------------
#[test]
fn determinism() {
    let artifacts = [
        "model.ckpt",
        "an/mass.csv",
        "an/variance.csv",
        "an/variance.json",
        "run/pruned.ckpt",
        "run/report.json",
        "run/summary.txt",
    ];
    let mut captured: Vec<Vec<Vec<u8>>> = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let (ckpt, corpus) = setup_cli(root);
        let an = root.join("an");
        let run = root.join("run");
        run_cli(&["analyze", "--ckpt", &ckpt, "--corpus", &corpus, "--out", an.to_str().unwrap()]);
        run_cli(&[
            "prune", "--ckpt", &ckpt, "--corpus", &corpus, "--criterion", "sparsegpt",
            "--sink-aware", "--out", run.to_str().unwrap(),
        ]);
        run_cli(&[
            "eval", "--ckpt", run.join("pruned.ckpt").to_str().unwrap(),
            "--corpus", &corpus, "--report", run.join("report.json").to_str().unwrap(),
        ]);
        run_cli(&[
            "report", "--report", run.join("report.json").to_str().unwrap(),
            "--out", run.to_str().unwrap(),
        ]);
        captured.push(artifacts.iter().map(|a| read(&root.join(a))).collect());
    }
    for (i, name) in artifacts.iter().enumerate() {
        assert_eq!(captured[0][i], captured[1][i], "{name} differs between runs");
    }
    pass("determinism");
}

// ---------------------------------------------------------------------
// Criterion: attention invariants (row-stochastic, causal AR, T-step
// diffusion with no residual MASK)
// ---------------------------------------------------------------------
fn check_rows_stochastic(steps: &[Vec<Vec<DenseMatrix>>]) {
    for step in steps {
        for layer in step {
            for a in layer {
                for i in 0..a.rows() {
                    let sum: f64 = a.row(i).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
                }
            }
        }
    }
}

#[test]
fn attention_invariants() {
    let mut config = ModelConfig {
        mode: Mode::Autoregressive,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 32,
        max_seq_len: 32,
        seed: 21,
    };

    // AR: strictly causal, row-stochastic.
    let ar = init_random_model(&config).unwrap();
    let (_, trace) = decode_ar(&ar, &[1, 2, 3, 4], 6).unwrap();
    check_rows_stochastic(&trace.steps);
    for step in &trace.steps {
        for layer in step {
            for a in layer {
                for i in 0..a.rows() {
                    for j in i + 1..a.cols() {
                        assert_eq!(a.get(i, j), 0.0, "future leak at ({i},{j})");
                    }
                }
            }
        }
    }

    // Diffusion: exactly T steps, no residual MASK, row-stochastic.
    config.mode = Mode::MaskedDiffusion;
    let dlm = init_random_model(&config).unwrap();
    let mask = config.mask_token();
    for (schedule, steps) in [
        (UnmaskSchedule::Confidence, 5usize),
        (UnmaskSchedule::Random, 7),
    ] {
        let (tokens, trace) = denoise_diffusion(&dlm, &[1, 2, 3], 9, steps, schedule, 4).unwrap();
        assert_eq!(trace.steps.len(), steps);
        assert!(tokens.iter().all(|&t| t != mask), "residual MASK");
        check_rows_stochastic(&trace.steps);
    }
    pass("attention-invariants");
}
