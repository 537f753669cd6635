//! Subcommand implementations. Each returns a summary whose `pass` decides
//! the exit code.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use fedalign_core::federation::{
    run_training, BackwardMode, RoundRecord, TrainConfig, TrainingOutcome,
};
use fedalign_core::feedback::{FeedbackMode, FeedbackSet};
use fedalign_core::gradcheck::{self, GradcheckOptions, GradcheckReport};
use fedalign_core::metrics::{
    bound_report, compare_runs, estimate_assumptions, representation_metrics, rescale_residuals,
    AssumptionEstimates, BoundMode, BoundRow, RepresentationMetrics,
};
use fedalign_core::Mlp;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{cell, join, now, with_output, write_manifest};

/// Tolerance for the feedback rescale invariants.
pub const RESCALE_TOLERANCE: f64 = 1e-9;

pub const METRICS_HEADER: [&str; 12] = [
    "round",
    "lr",
    "fa_layers",
    "drift",
    "train_loss",
    "train_accuracy",
    "eval_loss",
    "eval_accuracy",
    "grad_gap_start",
    "grad_gap_max",
    "feedback_warnings",
    "alignment",
];

fn metrics_csv(records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        let alignment: Vec<String> = r.alignment.iter().map(|a| cell(*a)).collect();
        w.write_record([
            r.round.to_string(),
            r.lr.to_string(),
            join(&r.fa_layers),
            r.drift.to_string(),
            r.train_loss.to_string(),
            r.train_accuracy.to_string(),
            r.eval_loss.to_string(),
            r.eval_accuracy.to_string(),
            cell(r.grad_gap_start),
            cell(r.grad_gap_max),
            r.feedback_warnings.to_string(),
            alignment.join(";"),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn rounds_jsonl(records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

const BOUND_HEADER: [&str; 17] = [
    "run",
    "mode",
    "round",
    "layer",
    "steps",
    "lhs",
    "rhs",
    "slack",
    "error_signal_term",
    "weight_divergence_term",
    "alpha_term",
    "activation_term",
    "input_term",
    "x_tilde",
    "delta_tilde",
    "holds",
    "spectral_norm",
];

fn bound_csv(rows: &[(String, BoundRow)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BOUND_HEADER)?;
    for (run, r) in rows {
        w.write_record([
            run.clone(),
            r.mode.name().to_string(),
            r.round.to_string(),
            r.layer.to_string(),
            r.steps.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.slack.to_string(),
            r.error_signal_term.to_string(),
            r.weight_divergence_term.to_string(),
            r.alpha_term.to_string(),
            r.activation_term.to_string(),
            r.input_term.to_string(),
            r.x_tilde.to_string(),
            r.delta_tilde.to_string(),
            r.holds.to_string(),
            "power_iteration".to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Bound mode for the layers of a run that carried feedback.
fn fa_bound_mode(backward: BackwardMode) -> BoundMode {
    match backward {
        BackwardMode::Flfa(FeedbackMode::GlobalWeights) => BoundMode::FaRescaled,
        _ => BoundMode::Fa,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FinalMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub representation: Option<RepresentationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assumptions: Option<AssumptionEstimates>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub rounds: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_eval_accuracy: f64,
    pub empty_clients: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_metrics: Option<FinalMetrics>,
    /// Bound rows with `lhs > rhs`, when traces were recorded.
    pub bound_violations: usize,
    pub pass: bool,
}

/// Feedback matrices for the last selected layers of a finished run.
fn final_feedback(
    cfg: &TrainConfig,
    model: &Mlp,
    records: &[RoundRecord],
) -> Result<Option<FeedbackSet>> {
    let Some(mode) = cfg.backward.feedback_mode() else {
        return Ok(None);
    };
    let layers: BTreeSet<usize> = records
        .last()
        .map(|r| r.next_fa_layers.iter().copied().collect())
        .unwrap_or_default();
    Ok(Some(FeedbackSet::init(model, &layers, mode, cfg.seed)?))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let started = now();
    let tcfg = cfg.train_config(cfg.seed);
    let (train, eval) = cfg.load_data(cfg.seed)?;
    let partition = cfg.make_partition(&train, cfg.seed)?;
    let outcome = run_training(&tcfg, &train, eval.as_ref(), &partition)?;
    let eval_ds = eval.as_ref().unwrap_or(&train);

    let final_metrics = if cfg.metrics.representation || cfg.metrics.assumptions {
        let representation = if cfg.metrics.representation {
            Some(representation_metrics(
                &outcome.model.features(&eval_ds.features)?,
                &eval_ds.labels,
            )?)
        } else {
            None
        };
        let assumptions = if cfg.metrics.assumptions {
            let fb = final_feedback(&tcfg, &outcome.model, &outcome.records)?;
            Some(estimate_assumptions(
                &outcome.model,
                &train,
                &partition,
                fb.as_ref(),
                tcfg.batch_size,
                cfg.seed,
            )?)
        } else {
            None
        };
        Some(FinalMetrics {
            representation,
            assumptions,
        })
    } else {
        None
    };

    let bound_rows = if tcfg.record_traces {
        bound_report(
            &outcome.traces,
            fa_bound_mode(tcfg.backward),
            tcfg.activation,
        )?
    } else {
        Vec::new()
    };
    let bound_violations = bound_rows.iter().filter(|r| !r.holds).count();

    let last = outcome
        .records
        .last()
        .context("training produced no rounds")?;
    let summary = TrainSummary {
        rounds: outcome.records.len(),
        initial_train_loss: outcome.initial_train_loss,
        final_train_loss: last.train_loss,
        final_eval_accuracy: last.eval_accuracy,
        empty_clients: partition.empty_clients.clone(),
        final_metrics,
        bound_violations,
        pass: bound_violations == 0,
    };

    with_output(&cfg.output_dir, |out| {
        out.write("rounds.jsonl", &rounds_jsonl(&outcome.records)?)?;
        out.write("metrics.csv", &metrics_csv(&outcome.records)?)?;
        out.write("model.json", outcome.model.to_json().as_bytes())?;
        if let Some(fm) = &summary.final_metrics {
            out.write_json("final_metrics.json", fm)?;
        }
        if tcfg.record_traces {
            let rows: Vec<(String, BoundRow)> = bound_rows
                .iter()
                .map(|r| (tcfg.backward.name().to_string(), r.clone()))
                .collect();
            out.write("bound_report.csv", &bound_csv(&rows)?)?;
        }
        write_manifest(out, "train", cfg.seed, cfg, started)
    })?;
    Ok(summary)
}

/// Methods run by `compare`, in column order.
pub fn compare_methods(ablations: bool) -> Vec<BackwardMode> {
    let mut m = vec![
        BackwardMode::Bp,
        BackwardMode::Flfa(FeedbackMode::GlobalWeights),
    ];
    if ablations {
        m.push(BackwardMode::Flfa(FeedbackMode::RandomFixed));
        m.push(BackwardMode::Flfa(FeedbackMode::GlobalNoRescale));
    }
    m
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    /// Mean eval accuracy over the final window.
    pub final_accuracy: f64,
    /// Mean drift over all rounds.
    pub mean_drift: f64,
    /// Smallest and largest round-start gradient gap over rounds that used
    /// feedback; absent when no round did.
    pub grad_gap_start_min: Option<f64>,
    pub grad_gap_start_max: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Mean `H_BP − H_FLFA` over rounds `drift_from..`.
    pub mean_drift_reduction: f64,
    pub drift_reduction_positive: bool,
    /// FLFA final accuracy minus BP final accuracy.
    pub accuracy_gain: f64,
    pub empty_clients: Vec<usize>,
    pub methods: BTreeMap<String, MethodSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareSummary {
    pub methods: Vec<String>,
    pub drift_from: usize,
    pub final_window: usize,
    pub seeds: Vec<SeedSummary>,
    pub positive_drift_seeds: usize,
    /// Mean over seeds of each method's final accuracy.
    pub mean_final_accuracy: BTreeMap<String, f64>,
    pub pass: bool,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn method_summary(outcome: &TrainingOutcome, window: usize) -> MethodSummary {
    let recs = &outcome.records;
    let tail = &recs[recs.len().saturating_sub(window)..];
    let gaps: Vec<f64> = recs
        .iter()
        .filter(|r| !r.fa_layers.is_empty())
        .filter_map(|r| r.grad_gap_start)
        .collect();
    MethodSummary {
        initial_train_loss: outcome.initial_train_loss,
        final_train_loss: recs.last().map_or(f64::NAN, |r| r.train_loss),
        final_accuracy: mean(tail.iter().map(|r| r.eval_accuracy)),
        mean_drift: mean(recs.iter().map(|r| r.drift)),
        grad_gap_start_min: gaps.iter().copied().reduce(f64::min),
        grad_gap_start_max: gaps.iter().copied().reduce(f64::max),
    }
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<CompareSummary> {
    let started = now();
    let methods = compare_methods(cfg.compare.ablations);
    let window = cfg.compare.final_window;
    let mut header = vec![
        "seed".to_string(),
        "round".to_string(),
        "drift_bp".to_string(),
        "drift_flfa".to_string(),
        "drift_reduction".to_string(),
        "accuracy_bp".to_string(),
        "accuracy_flfa".to_string(),
        "accuracy_gain".to_string(),
    ];
    for m in &methods[2..] {
        header.push(format!("drift_{m}"));
        header.push(format!("accuracy_{m}"));
    }
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    csv_out.write_record(&header)?;

    let mut seeds = Vec::new();
    for seed in cfg.compare_seeds() {
        let (train, eval) = cfg.load_data(seed)?;
        let partition = cfg.make_partition(&train, seed)?;
        let mut outcomes = Vec::with_capacity(methods.len());
        for &m in &methods {
            let tcfg = TrainConfig {
                backward: m,
                ..cfg.train_config(seed)
            };
            outcomes.push(
                run_training(&tcfg, &train, eval.as_ref(), &partition)
                    .with_context(|| format!("seed {seed}, {m}"))?,
            );
        }
        let report = compare_runs(&outcomes[0].records, &outcomes[1].records)?;
        for (k, row) in report.rows.iter().enumerate() {
            let mut rec = vec![
                seed.to_string(),
                row.round.to_string(),
                row.drift_bp.to_string(),
                row.drift_flfa.to_string(),
                row.drift_reduction.to_string(),
                row.accuracy_bp.to_string(),
                row.accuracy_flfa.to_string(),
                row.accuracy_gain.to_string(),
            ];
            for o in &outcomes[2..] {
                rec.push(o.records[k].drift.to_string());
                rec.push(o.records[k].eval_accuracy.to_string());
            }
            csv_out.write_record(&rec)?;
        }
        let per_method: BTreeMap<String, MethodSummary> = methods
            .iter()
            .zip(&outcomes)
            .map(|(m, o)| (m.name().to_string(), method_summary(o, window)))
            .collect();
        let reduction = report.mean_reduction_from(cfg.compare.drift_from);
        seeds.push(SeedSummary {
            seed,
            mean_drift_reduction: reduction,
            drift_reduction_positive: reduction > 0.0,
            accuracy_gain: per_method["flfa"].final_accuracy - per_method["bp"].final_accuracy,
            empty_clients: partition.empty_clients.clone(),
            methods: per_method,
        });
    }

    let mean_final_accuracy = methods
        .iter()
        .map(|m| {
            (
                m.name().to_string(),
                mean(seeds.iter().map(|s| s.methods[m.name()].final_accuracy)),
            )
        })
        .collect();
    let summary = CompareSummary {
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        drift_from: cfg.compare.drift_from,
        final_window: window,
        positive_drift_seeds: seeds.iter().filter(|s| s.drift_reduction_positive).count(),
        seeds,
        mean_final_accuracy,
        pass: true,
    };
    let csv_bytes = csv_out.into_inner()?;
    with_output(&cfg.output_dir, |out| {
        out.write("compare.csv", &csv_bytes)?;
        out.write_json("summary.json", &summary)?;
        write_manifest(out, "compare", cfg.seed, cfg, started)
    })?;
    Ok(summary)
}

/// Plain-text table of a comparison, one line per seed.
pub fn compare_table(s: &CompareSummary) -> String {
    let mut t = format!("{:>6} {:>12} {:>5}", "seed", "drift_red", "sign");
    for m in &s.methods {
        t.push_str(&format!(" {:>16}", format!("acc_{m}")));
    }
    t.push('\n');
    for seed in &s.seeds {
        t.push_str(&format!(
            "{:>6} {:>12.6} {:>5}",
            seed.seed,
            seed.mean_drift_reduction,
            if seed.drift_reduction_positive {
                "+"
            } else {
                "-"
            }
        ));
        for m in &s.methods {
            t.push_str(&format!(" {:>16.4}", seed.methods[m].final_accuracy));
        }
        t.push('\n');
    }
    t.push_str(&format!(
        "drift reduced in {}/{} seeds (rounds {}+)\n",
        s.positive_drift_seeds,
        s.seeds.len(),
        s.drift_from
    ));
    t
}

pub fn cmd_gradcheck(opts: &GradcheckOptions, output: Option<&Path>) -> Result<GradcheckReport> {
    let report = gradcheck::run(opts)?;
    if let Some(path) = output {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunBoundSummary {
    pub run: String,
    pub rows: usize,
    pub violations: usize,
    pub min_slack: f64,
    /// Largest weight-divergence term over rows that used feedback.
    pub fa_weight_divergence_max: Option<f64>,
    /// Per-step rescale checks (client steps × feedback layers).
    pub rescale_checks: usize,
    /// Distinct client batch steps covered by the rescale checks.
    pub rescale_steps: usize,
    pub max_norm_residual: f64,
    pub max_direction_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundSummary {
    pub runs: Vec<RunBoundSummary>,
    pub rescale_tolerance: f64,
    pub pass: bool,
}

/// Trace-mode training for backpropagation and both shared-feedback
/// variants, with every recorded step checked against its drift bound.
pub fn cmd_boundcheck(cfg: &RunConfig) -> Result<BoundSummary> {
    let started = now();
    if cfg.partition.clients != 2 {
        bail!("partition.clients: boundcheck needs exactly 2 clients");
    }
    if cfg.train.client_fraction != 1.0 {
        bail!("train.client_fraction: boundcheck needs both clients every round");
    }
    if cfg.train.local_steps.is_none() {
        bail!("train.local_steps: boundcheck needs a fixed number of local steps");
    }
    let (train, eval) = cfg.load_data(cfg.seed)?;
    let partition = cfg.make_partition(&train, cfg.seed)?;
    if !partition.empty_clients.is_empty() {
        bail!(
            "partition: client {:?} received no samples",
            partition.empty_clients
        );
    }

    let mut all_rows = Vec::new();
    let mut runs = Vec::new();
    for backward in [
        BackwardMode::Bp,
        BackwardMode::Flfa(FeedbackMode::GlobalWeights),
        BackwardMode::Flfa(FeedbackMode::GlobalNoRescale),
    ] {
        let tcfg = TrainConfig {
            backward,
            record_traces: true,
            ..cfg.train_config(cfg.seed)
        };
        let outcome = run_training(&tcfg, &train, eval.as_ref(), &partition)
            .with_context(|| format!("{backward}"))?;
        let rows = bound_report(&outcome.traces, fa_bound_mode(backward), tcfg.activation)?;
        let residuals = rescale_residuals(&outcome.traces);
        let checked_rescale = backward == BackwardMode::Flfa(FeedbackMode::GlobalWeights);
        let fa_rows: Vec<&BoundRow> = rows.iter().filter(|r| r.mode != BoundMode::Bp).collect();
        runs.push(RunBoundSummary {
            run: backward.name().to_string(),
            rows: rows.len(),
            violations: rows.iter().filter(|r| !r.holds).count(),
            min_slack: rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
            fa_weight_divergence_max: fa_rows
                .iter()
                .map(|r| r.weight_divergence_term)
                .reduce(f64::max),
            rescale_checks: if checked_rescale { residuals.len() } else { 0 },
            rescale_steps: if checked_rescale {
                residuals
                    .iter()
                    .map(|r| (r.round, r.client, r.step))
                    .collect::<BTreeSet<_>>()
                    .len()
            } else {
                0
            },
            max_norm_residual: if checked_rescale {
                residuals
                    .iter()
                    .map(|r| r.norm_residual)
                    .fold(0.0, f64::max)
            } else {
                0.0
            },
            max_direction_residual: if checked_rescale {
                residuals
                    .iter()
                    .map(|r| r.direction_residual)
                    .fold(0.0, f64::max)
            } else {
                0.0
            },
        });
        all_rows.extend(rows.into_iter().map(|r| (backward.name().to_string(), r)));
    }
    let pass = runs.iter().all(|r| {
        r.violations == 0
            && r.fa_weight_divergence_max.is_none_or(|w| w == 0.0)
            && r.max_norm_residual <= RESCALE_TOLERANCE
            && r.max_direction_residual <= RESCALE_TOLERANCE
    });
    let summary = BoundSummary {
        runs,
        rescale_tolerance: RESCALE_TOLERANCE,
        pass,
    };
    with_output(&cfg.output_dir, |out| {
        out.write("bound_report.csv", &bound_csv(&all_rows)?)?;
        out.write_json("bound_summary.json", &summary)?;
        write_manifest(out, "boundcheck", cfg.seed, cfg, started)
    })?;
    Ok(summary)
}

/// Shard assignment as JSON, `{"client id": [sample indices]}`.
pub fn cmd_partition(cfg: &RunConfig) -> Result<String> {
    let (train, _) = cfg.load_data(cfg.seed)?;
    let partition = cfg.make_partition(&train, cfg.seed)?;
    Ok(partition.to_json())
}
