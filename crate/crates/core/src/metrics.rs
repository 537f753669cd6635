//! Drift, representation, and bound diagnostics.

use serde::Serialize;

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::federation::{RoundRecord, RoundTrace, StepTrace};
use crate::feedback::FeedbackSet;
use crate::matrix::Matrix;
use crate::nn::{backward, backward_bp, cross_entropy, Activation, Mlp};

/// `H = (1/K) Σ ‖Δw_i − mean(Δw)‖₂` over flattened client updates.
pub fn local_drift(updates: &[Vec<f64>]) -> Result<f64> {
    let first = updates
        .first()
        .ok_or(Error::Empty("local_drift: no updates"))?;
    if updates.iter().any(|u| u.len() != first.len()) {
        return Err(Error::TraceMismatch("updates differ in length".into()));
    }
    let k = updates.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for u in updates {
        for (m, v) in mean.iter_mut().zip(u) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k;
    }
    Ok(updates
        .iter()
        .map(|u| {
            u.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RepresentationMetrics {
    /// Mean over classes of the mean distance to the class centroid.
    pub intra: f64,
    /// Mean distance between class centroids over all class pairs.
    pub inter: f64,
    /// `inter / intra`; `+∞` when `intra == 0`.
    pub separability: f64,
}

/// Class compactness and separation of `features` (`dim x n`, one sample
/// per column). Classes with no samples are ignored.
pub fn representation_metrics(
    features: &Matrix,
    labels: &[usize],
) -> Result<RepresentationMetrics> {
    if features.cols() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "representation_metrics",
            left: features.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let dim = features.rows();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (n, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (d, s) in sums[y].iter_mut().enumerate() {
            *s += features.get(d, n);
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Empty("representation_metrics needs two classes"));
    }
    let centroids: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            sums[c]
                .iter()
                .map(|s| s / counts[c].max(1) as f64)
                .collect()
        })
        .collect();
    let mut spread = vec![0.0; classes];
    for (n, &y) in labels.iter().enumerate() {
        let d2: f64 = (0..dim)
            .map(|d| (features.get(d, n) - centroids[y][d]).powi(2))
            .sum();
        spread[y] += d2.sqrt();
    }
    let intra = present
        .iter()
        .map(|&c| spread[c] / counts[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    let mut pair_total = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            pair_total += centroids[a]
                .iter()
                .zip(&centroids[b])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    let inter = pair_total / pairs as f64;
    let separability = if intra == 0.0 {
        f64::INFINITY
    } else {
        inter / intra
    };
    Ok(RepresentationMetrics {
        intra,
        inter,
        separability,
    })
}

/// Which drift bound a trace pair is checked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Local weight transposes in the backward pass.
    Bp,
    /// One feedback matrix shared by both clients.
    Fa,
    /// Shared direction, per-client norm (`B_i = a_i W`).
    FaRescaled,
}

impl BoundMode {
    pub fn name(self) -> &'static str {
        match self {
            BoundMode::Bp => "bp",
            BoundMode::Fa => "fa",
            BoundMode::FaRescaled => "fa_rescaled",
        }
    }
}

/// One prefix of one round for one layer: the first `steps` local steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub mode: BoundMode,
    pub round: usize,
    pub layer: usize,
    pub steps: usize,
    /// `‖Δ_i − Δ_j‖_F` from the actual weights.
    pub lhs: f64,
    pub error_signal_term: f64,
    /// Zero outside [`BoundMode::Bp`] unless the clients' feedback differs.
    pub weight_divergence_term: f64,
    /// `|1 − α|` term; only nonzero in [`BoundMode::FaRescaled`].
    pub alpha_term: f64,
    pub activation_term: f64,
    pub input_term: f64,
    pub rhs: f64,
    pub slack: f64,
    pub x_tilde: f64,
    pub delta_tilde: f64,
    pub holds: bool,
}

fn col_norm(m: &Matrix, c: usize) -> f64 {
    (0..m.rows())
        .map(|r| m.get(r, c).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn col_diff_norm(a: &Matrix, b: &Matrix, c: usize) -> f64 {
    (0..a.rows())
        .map(|r| (a.get(r, c) - b.get(r, c)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Checks the drift bound for `layer` between two clients' step traces.
///
/// Each local step contributes `η Σ_n ‖δ_{i,n} h_{i,n}ᵀ − δ_{j,n} h_{j,n}ᵀ‖_F`
/// over paired batch columns, and every per-sample term is bounded with
/// `A_· ∈ {w_{l+1}, B_{l+1}}` the matrix that carried the error down and
/// `φ` the largest activation derivative:
///
/// * error signal: `x̃ φ ‖A_i‖₂ ‖δ⁺_i − δ⁺_j‖`
/// * weight divergence: `x̃ δ̃ φ ‖A_i − A_j‖₂` (BP and shared-feedback FA)
/// * `|1−α|` term: `x̃ δ̃ φ |1 − α| ‖A_i‖₂` with `α = ‖A_j‖_F / ‖A_i‖_F`
/// * activation: `x̃ δ̃ ‖A_j‖₂ ‖f'(z_i) − f'(z_j)‖_∞`
/// * input: `δ̃ φ ‖A_j‖₂ ‖h_i − h_j‖`
///
/// Rows are emitted for every prefix `1..=s` of the round. `layer` must
/// have a layer above it.
pub fn drift_bound_check(
    trace_i: &[StepTrace],
    trace_j: &[StepTrace],
    layer: usize,
    lr: f64,
    mode: BoundMode,
    activation: Activation,
    round: usize,
) -> Result<Vec<BoundRow>> {
    if trace_i.len() != trace_j.len() {
        return Err(Error::TraceMismatch(format!(
            "{} steps vs {} steps",
            trace_i.len(),
            trace_j.len()
        )));
    }
    let Some(first) = trace_i.first() else {
        return Ok(Vec::new());
    };
    let above = layer + 1;
    if above >= first.inputs.len() {
        return Err(Error::InvalidLayer {
            index: above,
            layers: first.inputs.len(),
        });
    }
    for (a, b) in trace_i.iter().zip(trace_j) {
        if a.inputs[layer].shape() != b.inputs[layer].shape() {
            return Err(Error::TraceMismatch(
                "batch shapes differ between clients".into(),
            ));
        }
    }

    let both = || trace_i.iter().chain(trace_j);
    let x_tilde = both()
        .flat_map(|s| (0..s.inputs[layer].cols()).map(move |n| col_norm(&s.inputs[layer], n)))
        .fold(0.0, f64::max);
    let delta_tilde = both()
        .flat_map(|s| (0..s.deltas[above].cols()).map(move |n| col_norm(&s.deltas[above], n)))
        .fold(0.0, f64::max);
    let phi = both()
        .map(|s| {
            s.pre_activations[layer]
                .map(|z| activation.derivative(z))
                .max_abs()
        })
        .fold(0.0, f64::max);

    let w0_i = &trace_i[0].weights_before[layer];
    let w0_j = &trace_j[0].weights_before[layer];
    let mut rows = Vec::with_capacity(trace_i.len());
    let (mut err, mut wdiv, mut alpha_t, mut act_t, mut inp) = (0.0, 0.0, 0.0, 0.0, 0.0);

    for (k, (si, sj)) in trace_i.iter().zip(trace_j).enumerate() {
        let a_i = &si.operators[above];
        let a_j = &sj.operators[above];
        let norm_ai = a_i.spectral_norm();
        let norm_aj = a_j.spectral_norm();
        let op_div = match mode {
            BoundMode::Bp | BoundMode::Fa => a_i.sub(a_j)?.spectral_norm(),
            BoundMode::FaRescaled => 0.0,
        };
        let one_minus_alpha = match mode {
            BoundMode::FaRescaled => {
                let fi = a_i.frobenius_norm();
                if fi == 0.0 {
                    0.0
                } else {
                    (1.0 - a_j.frobenius_norm() / fi).abs()
                }
            }
            _ => 0.0,
        };
        let fp_i = si.pre_activations[layer].map(|z| activation.derivative(z));
        let fp_j = sj.pre_activations[layer].map(|z| activation.derivative(z));
        let b = si.inputs[layer].cols();
        for n in 0..b {
            let d_delta = col_diff_norm(&si.deltas[above], &sj.deltas[above], n);
            let d_h = col_diff_norm(&si.inputs[layer], &sj.inputs[layer], n);
            let d_fp = (0..fp_i.rows())
                .map(|r| (fp_i.get(r, n) - fp_j.get(r, n)).abs())
                .fold(0.0, f64::max);
            err += lr * x_tilde * phi * norm_ai * d_delta;
            wdiv += lr * x_tilde * delta_tilde * phi * op_div;
            alpha_t += lr * x_tilde * delta_tilde * phi * one_minus_alpha * norm_ai;
            act_t += lr * x_tilde * delta_tilde * norm_aj * d_fp;
            inp += lr * delta_tilde * phi * norm_aj * d_h;
        }
        let lhs = si.weights_after[layer]
            .sub(w0_i)?
            .sub(&sj.weights_after[layer].sub(w0_j)?)?
            .frobenius_norm();
        let rhs = err + wdiv + alpha_t + act_t + inp;
        rows.push(BoundRow {
            mode,
            round,
            layer,
            steps: k + 1,
            lhs,
            error_signal_term: err,
            weight_divergence_term: wdiv,
            alpha_term: alpha_t,
            activation_term: act_t,
            input_term: inp,
            rhs,
            slack: rhs - lhs,
            x_tilde,
            delta_tilde,
            holds: lhs <= rhs,
        });
    }
    Ok(rows)
}

/// Bound rows for every recorded round, for client pair (0, 1) of each
/// round and every layer that has a layer above it. Rows whose upper layer
/// was in that round's feedback set use `fa_mode`, the rest use
/// [`BoundMode::Bp`].
pub fn bound_report(
    traces: &[RoundTrace],
    fa_mode: BoundMode,
    activation: Activation,
) -> Result<Vec<BoundRow>> {
    let mut rows = Vec::new();
    for rt in traces {
        if rt.clients.len() < 2 {
            return Err(Error::TraceMismatch(format!(
                "round {} has fewer than two clients",
                rt.round
            )));
        }
        let (ci, cj) = (&rt.clients[0], &rt.clients[1]);
        let Some(step) = ci.steps.first() else {
            continue;
        };
        for layer in 0..step.inputs.len().saturating_sub(1) {
            let mode = if rt.fa_layers.contains(&(layer + 1)) {
                fa_mode
            } else {
                BoundMode::Bp
            };
            rows.extend(drift_bound_check(
                &ci.steps, &cj.steps, layer, rt.lr, mode, activation, rt.round,
            )?);
        }
    }
    Ok(rows)
}

/// Per step and feedback layer: `| ‖B_l‖_F − ‖w_l‖_F | / ‖w_l‖_F` and the
/// largest entry of `B_l/‖B_l‖_F − W_l/‖W_l‖_F`, measured after the step's
/// rescale. `W_l` is the client's round-start weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RescaleResidual {
    pub round: usize,
    pub client: usize,
    pub step: usize,
    pub layer: usize,
    pub norm_residual: f64,
    pub direction_residual: f64,
}

pub fn rescale_residuals(traces: &[RoundTrace]) -> Vec<RescaleResidual> {
    let mut out = Vec::new();
    for rt in traces {
        for ct in &rt.clients {
            let Some(first) = ct.steps.first() else {
                continue;
            };
            for (k, step) in ct.steps.iter().enumerate() {
                for (l, b) in &step.feedback_after {
                    let w = &step.weights_after[*l];
                    let reference = &first.weights_before[*l];
                    let wn = w.frobenius_norm();
                    let bn = b.frobenius_norm();
                    let norm_residual = (bn - wn).abs() / wn.max(1e-30);
                    let direction_residual = b
                        .scale(1.0 / bn.max(1e-300))
                        .sub(&reference.scale(1.0 / reference.frobenius_norm().max(1e-300)))
                        .map(|m| m.max_abs())
                        .unwrap_or(f64::INFINITY);
                    out.push(RescaleResidual {
                        round: rt.round,
                        client: ct.client,
                        step: k,
                        layer: *l,
                        norm_residual,
                        direction_residual,
                    });
                }
            }
        }
    }
    out
}

/// Empirical versions of the convergence-analysis constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AssumptionEstimates {
    /// Largest `‖∇^B ℓ − ∇ℓ‖₂` over sampled batches.
    pub g_hat: f64,
    /// `sqrt(max_i mean_b ‖∇ℓ_b − ∇J_i‖²)`.
    pub sigma_hat: f64,
    /// `sqrt(Σ π_i ‖∇J_i − ∇𝒥‖²)`.
    pub gamma_hat: f64,
}

fn flat_grad(
    model: &Mlp,
    feedback: Option<&FeedbackSet>,
    x: &Matrix,
    y: &[usize],
) -> Result<Vec<f64>> {
    let trace = model.forward(x)?;
    let (_, d) = cross_entropy(&trace.output, y)?;
    Ok(match feedback {
        Some(fb) => backward(model, Some(fb), &trace, &d)?.grads.flatten(),
        None => backward_bp(model, &trace, &d)?.flatten(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Estimates `Ĝ`, `σ̂` and `γ̂` at `model` using one shuffled epoch of
/// `batch_size` batches per client.
pub fn estimate_assumptions(
    model: &Mlp,
    ds: &Dataset,
    partition: &Partition,
    feedback: Option<&FeedbackSet>,
    batch_size: usize,
    seed: u64,
) -> Result<AssumptionEstimates> {
    let shards: Vec<_> = partition.shards.iter().filter(|s| !s.is_empty()).collect();
    if shards.is_empty() {
        return Err(Error::Empty("estimate_assumptions: no samples"));
    }
    let total: f64 = shards.iter().map(|s| s.len() as f64).sum();
    let mut g_hat: f64 = 0.0;
    let mut sigma2: f64 = 0.0;
    let mut full = Vec::with_capacity(shards.len());
    for shard in &shards {
        let batches = shard.batches(
            ds,
            batch_size,
            crate::rng::derive_seed(seed, &[shard.id as u64]),
        );
        let mut batch_grads = Vec::with_capacity(batches.len());
        for b in &batches {
            let g_b = flat_grad(model, None, &b.features, &b.labels)?;
            if let Some(fb) = feedback {
                let g_fa = flat_grad(model, Some(fb), &b.features, &b.labels)?;
                g_hat = g_hat.max(sq_dist(&g_fa, &g_b).sqrt());
            }
            batch_grads.push((b.labels.len() as f64 / shard.len() as f64, g_b));
        }
        // the shard loss is the size-weighted mean of the batch losses
        let mut g_full = vec![0.0; batch_grads[0].1.len()];
        for (w, g) in &batch_grads {
            for (a, v) in g_full.iter_mut().zip(g) {
                *a += w * v;
            }
        }
        let var: f64 = batch_grads.iter().map(|(_, g)| sq_dist(g, &g_full)).sum();
        sigma2 = sigma2.max(var / batches.len() as f64);
        full.push((shard.len() as f64 / total, g_full));
    }
    let mut global = vec![0.0; full[0].1.len()];
    for (pi, g) in &full {
        for (a, v) in global.iter_mut().zip(g) {
            *a += pi * v;
        }
    }
    let gamma2: f64 = full.iter().map(|(pi, g)| pi * sq_dist(g, &global)).sum();
    Ok(AssumptionEstimates {
        g_hat,
        sigma_hat: sigma2.sqrt(),
        gamma_hat: gamma2.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub round: usize,
    pub drift_bp: f64,
    pub drift_flfa: f64,
    /// `H_BP − H_FLFA`; positive when feedback alignment drifts less.
    pub drift_reduction: f64,
    pub accuracy_bp: f64,
    pub accuracy_flfa: f64,
    pub accuracy_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub rows: Vec<CompareRow>,
    pub mean_drift_reduction: f64,
    pub mean_accuracy_gain: f64,
}

impl DriftReport {
    /// Mean drift reduction over rounds `from..` (0-based, inclusive).
    pub fn mean_reduction_from(&self, from: usize) -> f64 {
        mean(
            self.rows
                .iter()
                .filter(|r| r.round >= from)
                .map(|r| r.drift_reduction),
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Pairs two runs round by round.
pub fn compare_runs(bp: &[RoundRecord], flfa: &[RoundRecord]) -> Result<DriftReport> {
    if bp.len() != flfa.len() {
        return Err(Error::TraceMismatch(format!(
            "{} rounds vs {} rounds",
            bp.len(),
            flfa.len()
        )));
    }
    let rows: Vec<CompareRow> = bp
        .iter()
        .zip(flfa)
        .map(|(a, b)| CompareRow {
            round: a.round,
            drift_bp: a.drift,
            drift_flfa: b.drift,
            drift_reduction: a.drift - b.drift,
            accuracy_bp: a.eval_accuracy,
            accuracy_flfa: b.eval_accuracy,
            accuracy_gain: b.eval_accuracy - a.eval_accuracy,
        })
        .collect();
    Ok(DriftReport {
        mean_drift_reduction: mean(rows.iter().map(|r| r.drift_reduction)),
        mean_accuracy_gain: mean(rows.iter().map(|r| r.accuracy_gain)),
        rows,
    })
}
