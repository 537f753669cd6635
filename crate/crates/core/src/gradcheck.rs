//! Finite-difference oracle for the hand-written backward pass.
//!
//! The loss used here is evaluated with plain per-sample loops that do not
//! share code with [`Mlp::forward`] or [`cross_entropy`](crate::nn::cross_entropy),
//! so a bug in either shows up as a mismatch.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::feedback::{FeedbackMode, FeedbackSet};
use crate::matrix::Matrix;
use crate::nn::{backward_bp, backward_fa, cross_entropy, Activation, DenseLayer, Mlp};
use crate::rng;

/// Mean cross-entropy of `model` on the columns of `x`, computed sample by
/// sample. Also returns the sign pattern of every ReLU pre-activation so
/// callers can detect when a perturbation crosses a kink.
pub fn reference_loss(model: &Mlp, x: &Matrix, labels: &[usize]) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for (n, &label) in labels.iter().enumerate() {
        let mut h: Vec<f64> = x.col(n);
        for layer in model.layers() {
            let mut next = Vec::with_capacity(layer.outputs());
            for r in 0..layer.outputs() {
                let mut z = layer.bias[r];
                for (c, hv) in h.iter().enumerate() {
                    z += layer.weight.get(r, c) * hv;
                }
                let v = match layer.activation {
                    Activation::Relu => {
                        pattern.push(z > 0.0);
                        if z > 0.0 {
                            z
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                };
                next.push(v);
            }
            h = next;
        }
        let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = h.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - h[label];
    }
    (total / labels.len() as f64, pattern)
}

/// Central differences for every parameter, in [`Mlp::flatten`] order.
/// The flag is set when the perturbation flips a ReLU, where the loss is not
/// differentiable and the estimate is meaningless.
pub fn numeric_gradient(model: &Mlp, x: &Matrix, labels: &[usize], step: f64) -> Vec<(f64, bool)> {
    let (_, base_pattern) = reference_loss(model, x, labels);
    let mut out = Vec::with_capacity(model.param_count());
    let mut probe = model.clone();
    for l in 0..model.layer_count() {
        let n_w = model.layer(l).weight.len();
        let n_b = model.layer(l).bias.len();
        for i in 0..n_w + n_b {
            let orig = param(&probe, l, i);
            set_param(&mut probe, l, i, orig + step);
            let (plus, p_pat) = reference_loss(&probe, x, labels);
            set_param(&mut probe, l, i, orig - step);
            let (minus, m_pat) = reference_loss(&probe, x, labels);
            set_param(&mut probe, l, i, orig);
            let kink = p_pat != base_pattern || m_pat != base_pattern;
            out.push(((plus - minus) / (2.0 * step), kink));
        }
    }
    out
}

fn param(model: &Mlp, l: usize, i: usize) -> f64 {
    let layer = model.layer(l);
    let n_w = layer.weight.len();
    if i < n_w {
        layer.weight.as_slice()[i]
    } else {
        layer.bias[i - n_w]
    }
}

fn set_param(model: &mut Mlp, l: usize, i: usize, v: f64) {
    let layer = model.layer_mut(l);
    let n_w = layer.weight.len();
    if i < n_w {
        layer.weight.as_mut_slice()[i] = v;
    } else {
        layer.bias[i - n_w] = v;
    }
}

/// Symmetric relative error with a floor on the denominator so that
/// near-zero gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

/// A random MLP with 1 to 3 layers, widths in `2..=max_width`, random
/// biases, and ReLU or Tanh hidden activations.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R, max_width: usize) -> (Mlp, Matrix, Vec<usize>) {
    let n_layers = rng.random_range(1..=3usize);
    let sizes: Vec<usize> = (0..=n_layers)
        .map(|_| rng.random_range(2..=max_width))
        .collect();
    let act = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let model = random_mlp_with_bias(rng, &sizes, act);
    let batch = rng.random_range(1..=4usize);
    let classes = sizes[n_layers];
    let x = Matrix::random_uniform(sizes[0], batch, 1.5, rng);
    let y = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (model, x, y)
}

pub fn random_mlp_with_bias<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize], act: Activation) -> Mlp {
    let last = sizes.len() - 2;
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let weight = crate::nn::init_weight(w[1], w[0], rng);
            let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            let activation = if i == last { Activation::Identity } else { act };
            DenseLayer::new(weight, bias, activation).expect("consistent shapes")
        })
        .collect();
    Mlp::new(layers).expect("chained shapes")
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub cases: usize,
    pub seed: u64,
    /// Negative control: perturbs analytic gradients so the check must fail.
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            cases: 50,
            seed: 0,
            corrupt_backward: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradcheckReport {
    pub cases: usize,
    pub parameters_checked: usize,
    pub kinks_skipped: usize,
    pub max_relative_error: f64,
    pub fa_collapse_residual: f64,
    pub empty_feedback_identical: bool,
    pub relative_error_threshold: f64,
    pub collapse_threshold: f64,
    pub pass: bool,
}

pub const RELATIVE_ERROR_THRESHOLD: f64 = 1e-6;
pub const COLLAPSE_THRESHOLD: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;

/// Runs the oracle on `opts.cases` random networks (at most 3 layers and
/// 16 units). Checks finite differences against backpropagation and that
/// feedback alignment with `B_l = w_l` reproduces backpropagation.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = rng::stream(opts.seed, &[rng::tag::GRADCHECK]);
    let mut max_rel: f64 = 0.0;
    let mut collapse: f64 = 0.0;
    let mut checked = 0;
    let mut kinks = 0;
    let mut empty_identical = true;
    for _ in 0..opts.cases {
        let (model, x, y) = random_case(&mut rng, 16);
        let trace = model.forward(&x)?;
        let (_, dlogits) = cross_entropy(&trace.output, &y)?;
        let mut analytic = backward_bp(&model, &trace, &dlogits)?;
        if opts.corrupt_backward {
            for w in &mut analytic.weights {
                *w = w.scale(1.01);
            }
        }
        let analytic = analytic.flatten();
        for (a, (n, kink)) in analytic
            .iter()
            .zip(numeric_gradient(&model, &x, &y, FD_STEP))
        {
            if kink {
                kinks += 1;
                continue;
            }
            checked += 1;
            max_rel = max_rel.max(relative_error(*a, n));
        }

        let bp = backward_bp(&model, &trace, &dlogits)?;
        let all: BTreeSet<usize> = (0..model.layer_count()).collect();
        let same = FeedbackSet::init(&model, &all, FeedbackMode::GlobalWeights, 0)?;
        let fa = backward_fa(&model, &same, &trace, &dlogits)?;
        for (a, b) in fa.flatten().iter().zip(bp.flatten()) {
            collapse = collapse.max((a - b).abs());
        }
        let empty = FeedbackSet::init(&model, &BTreeSet::new(), FeedbackMode::GlobalWeights, 0)?;
        empty_identical &= backward_fa(&model, &empty, &trace, &dlogits)? == bp;
    }
    let pass =
        max_rel < RELATIVE_ERROR_THRESHOLD && collapse <= COLLAPSE_THRESHOLD && empty_identical;
    Ok(GradcheckReport {
        cases: opts.cases,
        parameters_checked: checked,
        kinks_skipped: kinks,
        max_relative_error: max_rel,
        fa_collapse_residual: collapse,
        empty_feedback_identical: empty_identical,
        relative_error_threshold: RELATIVE_ERROR_THRESHOLD,
        collapse_threshold: COLLAPSE_THRESHOLD,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_loss_agrees_with_cross_entropy() {
        let mut rng = rng::stream(1, &[]);
        for _ in 0..10 {
            let (model, x, y) = random_case(&mut rng, 8);
            let t = model.forward(&x).unwrap();
            let (ce, _) = cross_entropy(&t.output, &y).unwrap();
            let (reference, _) = reference_loss(&model, &x, &y);
            assert!((ce - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn default_run_passes_and_is_reproducible() {
        let opts = GradcheckOptions {
            cases: 10,
            seed: 3,
            corrupt_backward: false,
        };
        let a = run(&opts).unwrap();
        assert!(a.pass, "{a:?}");
        assert_eq!(a, run(&opts).unwrap());
    }

    #[test]
    fn corrupted_backward_fails() {
        let report = run(&GradcheckOptions {
            cases: 5,
            seed: 3,
            corrupt_backward: true,
        })
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_relative_error > 1e-3);
    }
}
