//! Federated round loop: client selection, local training under
//! backpropagation or feedback alignment, weighted aggregation, and
//! server-side choice of the feedback layers for the next round.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, ClientShard, Dataset, Partition};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackMode, FeedbackSet};
use crate::matrix::{dot, norm2, Matrix};
use crate::metrics::local_drift;
use crate::nn::{accuracy, backward, backward_bp, cross_entropy, Activation, GradSet, Mlp, Sgd};
use crate::rng;

/// How local gradients are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackwardMode {
    Bp,
    Flfa(FeedbackMode),
}

impl BackwardMode {
    pub fn feedback_mode(self) -> Option<FeedbackMode> {
        match self {
            BackwardMode::Bp => None,
            BackwardMode::Flfa(m) => Some(m),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackwardMode::Bp => "bp",
            BackwardMode::Flfa(FeedbackMode::GlobalWeights) => "flfa",
            BackwardMode::Flfa(FeedbackMode::RandomFixed) => "flfa_random",
            BackwardMode::Flfa(FeedbackMode::GlobalNoRescale) => "flfa_no_rescale",
        }
    }
}

impl fmt::Display for BackwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for BackwardMode {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "bp" => Ok(BackwardMode::Bp),
            "flfa" => Ok(BackwardMode::Flfa(FeedbackMode::GlobalWeights)),
            "flfa_random" => Ok(BackwardMode::Flfa(FeedbackMode::RandomFixed)),
            "flfa_no_rescale" => Ok(BackwardMode::Flfa(FeedbackMode::GlobalNoRescale)),
            other => Err(format!(
                "unknown backward mode `{other}` (expected bp, flfa, flfa_random, flfa_no_rescale)"
            )),
        }
    }
}

impl From<BackwardMode> for String {
    fn from(m: BackwardMode) -> String {
        m.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    FedAvg,
    FedProx { mu: f64 },
    FedAvgM { server_momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    /// Least aligned layers.
    Lowest,
    /// Most aligned layers.
    Highest,
    Fixed(usize),
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// When set, every client takes exactly this many equal-size batch steps
    /// per round instead of `local_epochs` passes.
    pub local_steps: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied once per round.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub client_fraction: f64,
    pub backward: BackwardMode,
    pub algorithm: Algorithm,
    pub layer_strategy: LayerStrategy,
    pub fa_layer_count: usize,
    /// Feedback layers for round 0, before any alignment scores exist.
    pub initial_fa_layers: Vec<usize>,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Client worker threads; 0 uses every core.
    pub workers: usize,
    /// Record every local step for the drift-bound check.
    pub record_traces: bool,
    /// Keep per-client updates in the round records.
    pub keep_updates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 10,
            local_epochs: 1,
            local_steps: None,
            lr: 0.05,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_decay: 1.0,
            batch_size: 32,
            client_fraction: 1.0,
            backward: BackwardMode::Bp,
            algorithm: Algorithm::FedAvg,
            layer_strategy: LayerStrategy::Lowest,
            fa_layer_count: 1,
            initial_fa_layers: Vec::new(),
            hidden: vec![32],
            activation: Activation::Relu,
            seed: 0,
            workers: 0,
            record_traces: false,
            keep_updates: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.local_epochs == 0 && self.local_steps.is_none() {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config("client_fraction", "must lie in (0, 1]"));
        }
        match self.algorithm {
            Algorithm::FedProx { mu } if !(mu >= 0.0 && mu.is_finite()) => {
                return Err(Error::config("algorithm.mu", "must be nonnegative"));
            }
            Algorithm::FedAvgM { server_momentum } if !(0.0..1.0).contains(&server_momentum) => {
                return Err(Error::config(
                    "algorithm.server_momentum",
                    "must lie in [0, 1)",
                ));
            }
            _ => {}
        }
        if self.fa_layer_count == 0 {
            return Err(Error::config("fa_layer_count", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        let layers = self.hidden.len() + 1;
        if let Some(&bad) = self.initial_fa_layers.iter().find(|&&l| l >= layers) {
            return Err(Error::config(
                "initial_fa_layers",
                format!("layer {bad} does not exist"),
            ));
        }
        if let LayerStrategy::Fixed(l) = self.layer_strategy {
            if l >= layers {
                return Err(Error::config(
                    "layer_strategy",
                    format!("layer {l} does not exist"),
                ));
            }
        }
        if self.record_traces {
            if self.momentum != 0.0 || self.weight_decay != 0.0 {
                return Err(Error::config(
                    "record_traces",
                    "trace mode needs plain SGD (momentum = 0, weight_decay = 0)",
                ));
            }
            if self.local_steps.is_none() {
                return Err(Error::config(
                    "record_traces",
                    "trace mode needs local_steps",
                ));
            }
            if !matches!(self.algorithm, Algorithm::FedAvg) {
                return Err(Error::config(
                    "record_traces",
                    "trace mode runs FedAvg only",
                ));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round as i32)
    }
}

/// One client's update, `local - global`, flattened per layer as the
/// layer's weights followed by its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client: usize,
    pub samples: usize,
    pub layers: Vec<Vec<f64>>,
}

impl ClientUpdate {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.concat()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lr: f64,
    pub selected: Vec<usize>,
    /// Feedback layers used during this round.
    pub fa_layers: Vec<usize>,
    /// Mean distance of client updates to their mean.
    pub drift: f64,
    /// Per-layer alignment score; `None` where undefined.
    pub alignment: Vec<Option<f64>>,
    /// Feedback layers chosen for the next round.
    pub next_fa_layers: Vec<usize>,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Largest `‖∇^B − ∇‖` over clients at their first local step.
    pub grad_gap_start: Option<f64>,
    /// Largest `‖∇^B − ∇‖` over every local step of the round.
    pub grad_gap_max: Option<f64>,
    pub feedback_warnings: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub updates: Vec<ClientUpdate>,
}

/// Everything recorded about one local step, for one client.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub deltas: Vec<Matrix>,
    pub weights_before: Vec<Matrix>,
    pub weights_after: Vec<Matrix>,
    /// Matrix that carried the error from layer `l` down to `l - 1` (the
    /// forward weight or its feedback matrix). Entry 0 is unused.
    pub operators: Vec<Matrix>,
    /// Feedback matrices after the post-step rescale, per feedback layer.
    pub feedback_after: Vec<(usize, Matrix)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientTrace {
    pub client: usize,
    pub steps: Vec<StepTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    pub lr: f64,
    pub fa_layers: Vec<usize>,
    pub clients: Vec<ClientTrace>,
}

#[derive(Clone, Debug)]
pub struct LocalResult {
    pub model: Mlp,
    pub steps: usize,
    /// `‖∇^B − ∇‖₂` per step, only when feedback layers are active.
    pub grad_gaps: Vec<f64>,
    pub traces: Vec<StepTrace>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub records: Vec<RoundRecord>,
    pub model: Mlp,
    pub initial_train_loss: f64,
    pub initial_eval_accuracy: f64,
    pub traces: Vec<RoundTrace>,
}

/// Uniform sample of `max(1, round(fraction * n))` distinct clients, sorted.
pub fn select_clients<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut ids = rand::seq::index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// The batches one client visits in one round, in order.
fn local_batches(
    ds: &Dataset,
    shard: &ClientShard,
    cfg: &TrainConfig,
    client_seed: u64,
) -> Vec<Batch> {
    match cfg.local_steps {
        None => (0..cfg.local_epochs)
            .flat_map(|e| {
                shard.batches(
                    ds,
                    cfg.batch_size,
                    rng::derive_seed(client_seed, &[e as u64]),
                )
            })
            .collect(),
        Some(steps) => {
            let size = cfg.batch_size.min(shard.len());
            let mut out = Vec::with_capacity(steps);
            let mut epoch = 0u64;
            while out.len() < steps && size > 0 {
                let seed = rng::derive_seed(client_seed, &[epoch]);
                out.extend(
                    shard
                        .batches(ds, size, seed)
                        .into_iter()
                        .filter(|b| b.labels.len() == size)
                        .take(steps - out.len()),
                );
                epoch += 1;
            }
            out
        }
    }
}

/// Trains a copy of `global` on one shard.
///
/// With a feedback mode, the feedback set is built from `global` for
/// `fa_layers`, used in every backward pass, and rescaled after every step.
/// FedProx adds `mu * (w - W)` to every parameter gradient.
pub fn local_train(
    ds: &Dataset,
    shard: &ClientShard,
    global: &Mlp,
    cfg: &TrainConfig,
    fa_layers: &BTreeSet<usize>,
    lr: f64,
    client_seed: u64,
) -> Result<LocalResult> {
    if global.input_dim() != ds.dim() {
        return Err(Error::ShapeMismatch {
            op: "local_train input",
            left: global.layer(0).weight.shape(),
            right: (ds.dim(), 1),
        });
    }
    let mut local = global.clone();
    let mut opt = Sgd::new(lr, cfg.momentum, cfg.weight_decay)?;
    let mut feedback = match cfg.backward.feedback_mode() {
        Some(mode) if !fa_layers.is_empty() => {
            Some(FeedbackSet::init(global, fa_layers, mode, cfg.seed)?)
        }
        _ => None,
    };
    let mut grad_gaps = Vec::new();
    let mut traces = Vec::new();
    let batches = local_batches(ds, shard, cfg, client_seed);
    let steps = batches.len();

    for batch in batches {
        let trace = local.forward(&batch.features)?;
        let (_, dlogits) = cross_entropy(&trace.output, &batch.labels)?;
        let back = backward(&local, feedback.as_ref(), &trace, &dlogits)?;
        if feedback.is_some() {
            let bp = backward_bp(&local, &trace, &dlogits)?;
            let diff: f64 = back
                .grads
                .flatten()
                .iter()
                .zip(bp.flatten())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            grad_gaps.push(diff.sqrt());
        }
        let mut grads = back.grads;
        if let Algorithm::FedProx { mu } = cfg.algorithm {
            if mu != 0.0 {
                add_proximal(&mut grads, &local, global, mu)?;
            }
        }

        let before = cfg.record_traces.then(|| {
            let operators = (0..local.layer_count())
                .map(|l| {
                    feedback
                        .as_ref()
                        .and_then(|fb| fb.matrix(l))
                        .unwrap_or(&local.layer(l).weight)
                        .clone()
                })
                .collect::<Vec<_>>();
            let weights = local
                .layers()
                .iter()
                .map(|l| l.weight.clone())
                .collect::<Vec<_>>();
            (weights, operators)
        });

        opt.step(&mut local, &grads)?;
        if let Some(fb) = feedback.as_mut() {
            fb.rescale(&local)?;
        }

        if let Some((weights_before, operators)) = before {
            traces.push(StepTrace {
                inputs: trace.inputs,
                pre_activations: trace.pre_activations,
                deltas: back.deltas,
                weights_before,
                weights_after: local.layers().iter().map(|l| l.weight.clone()).collect(),
                operators,
                feedback_after: feedback
                    .as_ref()
                    .map(|fb| {
                        fb.layers()
                            .map(|l| (l, fb.matrix(l).unwrap().clone()))
                            .collect()
                    })
                    .unwrap_or_default(),
            });
        }
    }

    Ok(LocalResult {
        model: local,
        steps,
        grad_gaps,
        traces,
        warnings: feedback
            .map(|fb| fb.warnings().to_vec())
            .unwrap_or_default(),
    })
}

fn add_proximal(grads: &mut GradSet, local: &Mlp, global: &Mlp, mu: f64) -> Result<()> {
    for l in 0..local.layer_count() {
        let diff = local.layer(l).weight.sub(&global.layer(l).weight)?;
        grads.weights[l].add_scaled(mu, &diff)?;
        for ((g, w), w0) in grads.biases[l]
            .iter_mut()
            .zip(&local.layer(l).bias)
            .zip(&global.layer(l).bias)
        {
            *g += mu * (w - w0);
        }
    }
    Ok(())
}

/// Size-weighted average `Σ π_i w_i` with `π_i = size_i / Σ size`, over
/// every weight and bias. Models are combined in the order given.
pub fn aggregate(models: &[Mlp], sizes: &[usize]) -> Result<Mlp> {
    let first = models.first().ok_or(Error::Empty("aggregate: no models"))?;
    if models.len() != sizes.len() {
        return Err(Error::TraceMismatch("one size per model required".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::config("sizes", "every client size must be positive"));
    }
    if let Some(bad) = models.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            left: first.layer(0).weight.shape(),
            right: bad.layer(0).weight.shape(),
        });
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let mut out = first.clone();
    for l in 0..first.layer_count() {
        let mut acc = vec![0.0; first.layer_flat(l).len()];
        for (m, &s) in models.iter().zip(sizes) {
            let pi = s as f64 / total;
            for (a, v) in acc.iter_mut().zip(m.layer_flat(l)) {
                *a += pi * v;
            }
        }
        out.set_layer_flat(l, &acc)?;
    }
    Ok(out)
}

/// Server momentum for FedAvgM:
/// `buffer = coeff * buffer + (prev - aggregated)`, `new = prev - buffer`.
#[derive(Clone, Debug, Default)]
pub struct ServerMomentum {
    buffer: Option<Vec<Vec<f64>>>,
}

impl ServerMomentum {
    pub fn buffer(&self) -> Option<&[Vec<f64>]> {
        self.buffer.as_deref()
    }

    pub fn step(&mut self, prev: &Mlp, aggregated: &Mlp, coeff: f64) -> Result<Mlp> {
        if !prev.same_shape(aggregated) {
            return Err(Error::ShapeMismatch {
                op: "server_momentum_step",
                left: prev.layer(0).weight.shape(),
                right: aggregated.layer(0).weight.shape(),
            });
        }
        let buffer = self.buffer.get_or_insert_with(|| {
            (0..prev.layer_count())
                .map(|l| vec![0.0; prev.layer_flat(l).len()])
                .collect()
        });
        let mut out = prev.clone();
        for (l, buf) in buffer.iter_mut().enumerate() {
            let p = prev.layer_flat(l);
            let a = aggregated.layer_flat(l);
            for ((b, pv), av) in buf.iter_mut().zip(&p).zip(&a) {
                *b = coeff * *b + (pv - av);
            }
            let new: Vec<f64> = p.iter().zip(buf.iter()).map(|(pv, b)| pv - b).collect();
            out.set_layer_flat(l, &new)?;
        }
        Ok(out)
    }
}

const ALIGNMENT_EPS: f64 = 1e-12;

/// Per-layer mean cosine between each client's update and the mean update.
/// `updates[i][l]` is client `i`'s flattened update for layer `l`. A layer
/// is undefined when the mean or any client update is numerically zero.
pub fn cosine_alignment(updates: &[Vec<Vec<f64>>]) -> Vec<Option<f64>> {
    let Some(first) = updates.first() else {
        return Vec::new();
    };
    let k = updates.len() as f64;
    (0..first.len())
        .map(|l| {
            let len = first[l].len();
            let mut mean = vec![0.0; len];
            for u in updates {
                for (m, v) in mean.iter_mut().zip(&u[l]) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= k;
            }
            let mean_norm = norm2(&mean);
            if mean_norm < ALIGNMENT_EPS {
                return None;
            }
            let mut total = 0.0;
            for u in updates {
                let n = norm2(&u[l]);
                if n < ALIGNMENT_EPS {
                    return None;
                }
                total += dot(&u[l], &mean) / (n * mean_norm);
            }
            Some(total / k)
        })
        .collect()
}

/// Picks the feedback layers for the next round from alignment scores.
/// Ties go to the smaller layer index; undefined scores are never picked.
pub fn select_fa_layer(z: &[Option<f64>], strategy: LayerStrategy, count: usize) -> Vec<usize> {
    let mut defined: Vec<(usize, f64)> = z
        .iter()
        .enumerate()
        .filter_map(|(l, v)| v.map(|v| (l, v)))
        .collect();
    let mut chosen: Vec<usize> = match strategy {
        LayerStrategy::None => Vec::new(),
        LayerStrategy::Fixed(l) => vec![l],
        LayerStrategy::Lowest => {
            defined.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            defined.iter().take(count).map(|&(l, _)| l).collect()
        }
        LayerStrategy::Highest => {
            defined.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            defined.iter().take(count).map(|&(l, _)| l).collect()
        }
    };
    chosen.sort_unstable();
    chosen
}

/// Mean loss and accuracy of `model` over a whole dataset.
pub fn evaluate(model: &Mlp, ds: &Dataset) -> Result<(f64, f64)> {
    let logits = model.predict(&ds.features)?;
    let (loss, _) = cross_entropy(&logits, &ds.labels)?;
    Ok((loss, accuracy(&logits, &ds.labels)))
}

pub fn model_sizes(cfg: &TrainConfig, ds: &Dataset) -> Vec<usize> {
    let mut sizes = vec![ds.dim()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(ds.classes);
    sizes
}

pub fn init_model(cfg: &TrainConfig, ds: &Dataset) -> Result<Mlp> {
    let mut r = rng::stream(cfg.seed, &[rng::tag::MODEL_INIT]);
    Mlp::init(&model_sizes(cfg, ds), cfg.activation, &mut r)
}

/// Runs every round of federated training from a seeded initial model.
///
/// Round 0 trains with `initial_fa_layers`; later rounds use the layers
/// chosen from the previous round's alignment scores. Layer 0 is never a
/// candidate because no error is propagated below it.
pub fn run_training(
    cfg: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    partition: &Partition,
) -> Result<TrainingOutcome> {
    let model = init_model(cfg, train)?;
    run_training_from(cfg, train, eval, partition, model)
}

pub fn run_training_from(
    cfg: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    partition: &Partition,
    initial: Mlp,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let eval_ds = eval.unwrap_or(train);
    if initial.input_dim() != train.dim() || initial.output_dim() < train.classes {
        return Err(Error::config("hidden", "model does not match the dataset"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;

    let mut global = initial;
    let (initial_train_loss, _) = evaluate(&global, train)?;
    let (_, initial_eval_accuracy) = evaluate(&global, eval_ds)?;
    let mut momentum = ServerMomentum::default();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut traces = Vec::new();
    let mut fa_layers: BTreeSet<usize> = cfg.initial_fa_layers.iter().copied().collect();
    let n_clients = partition.shards.len();

    for round in 0..cfg.rounds {
        let lr = cfg.lr_at(round);
        let mut select_rng = rng::stream(cfg.seed, &[rng::tag::SELECT, round as u64]);
        let selected = select_clients(n_clients, cfg.client_fraction, &mut select_rng);
        let active: Vec<&ClientShard> = selected
            .iter()
            .map(|&c| &partition.shards[c])
            .filter(|s| !s.is_empty())
            .collect();
        let used_layers = match cfg.backward {
            BackwardMode::Bp => BTreeSet::new(),
            BackwardMode::Flfa(_) => fa_layers.clone(),
        };

        let results: Vec<LocalResult> = pool.install(|| {
            active
                .par_iter()
                .map(|shard| {
                    let seed = rng::derive_seed(
                        cfg.seed,
                        &[rng::tag::CLIENT, round as u64, shard.id as u64],
                    );
                    local_train(train, shard, &global, cfg, &used_layers, lr, seed)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let updates: Vec<ClientUpdate> = active
            .iter()
            .zip(&results)
            .map(|(shard, r)| ClientUpdate {
                client: shard.id,
                samples: shard.len(),
                layers: (0..global.layer_count())
                    .map(|l| {
                        r.model
                            .layer_flat(l)
                            .iter()
                            .zip(global.layer_flat(l))
                            .map(|(a, b)| a - b)
                            .collect()
                    })
                    .collect(),
            })
            .collect();

        let prev = global.clone();
        if !results.is_empty() {
            let models: Vec<Mlp> = results.iter().map(|r| r.model.clone()).collect();
            let sizes: Vec<usize> = active.iter().map(|s| s.len()).collect();
            let aggregated = aggregate(&models, &sizes)?;
            global = match cfg.algorithm {
                Algorithm::FedAvgM { server_momentum } => {
                    momentum.step(&prev, &aggregated, server_momentum)?
                }
                _ => aggregated,
            };
        }

        let per_layer: Vec<Vec<Vec<f64>>> = updates.iter().map(|u| u.layers.clone()).collect();
        let alignment = cosine_alignment(&per_layer);
        let mut candidates = alignment.clone();
        if let Some(first) = candidates.first_mut() {
            *first = None;
        }
        let next = select_fa_layer(&candidates, cfg.layer_strategy, cfg.fa_layer_count);
        let flat: Vec<Vec<f64>> = updates.iter().map(ClientUpdate::flatten).collect();
        let drift = if flat.is_empty() {
            0.0
        } else {
            local_drift(&flat)?
        };

        let (train_loss, train_accuracy) = evaluate(&global, train)?;
        let (eval_loss, eval_accuracy) = evaluate(&global, eval_ds)?;
        let gaps_active = results.iter().any(|r| !r.grad_gaps.is_empty());
        let grad_gap_start = gaps_active.then(|| {
            results
                .iter()
                .filter_map(|r| r.grad_gaps.first().copied())
                .fold(0.0, f64::max)
        });
        let grad_gap_max = gaps_active.then(|| {
            results
                .iter()
                .flat_map(|r| r.grad_gaps.iter().copied())
                .fold(0.0, f64::max)
        });

        if cfg.record_traces {
            traces.push(RoundTrace {
                round,
                lr,
                fa_layers: used_layers.iter().copied().collect(),
                clients: active
                    .iter()
                    .zip(&results)
                    .map(|(s, r)| ClientTrace {
                        client: s.id,
                        steps: r.traces.clone(),
                    })
                    .collect(),
            });
        }

        records.push(RoundRecord {
            round,
            lr,
            selected,
            fa_layers: used_layers.iter().copied().collect(),
            drift,
            alignment,
            next_fa_layers: next.clone(),
            train_loss,
            train_accuracy,
            eval_loss,
            eval_accuracy,
            grad_gap_start,
            grad_gap_max,
            feedback_warnings: results.iter().map(|r| r.warnings.len()).sum(),
            updates: if cfg.keep_updates {
                updates
            } else {
                Vec::new()
            },
        });

        fa_layers = next.into_iter().collect();
    }

    Ok(TrainingOutcome {
        records,
        model: global,
        initial_train_loss,
        initial_eval_accuracy,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, partition_dirichlet, partition_iid, BlobSpec, PartitionSpec};
    use crate::testutil::random_mlp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(seed: u64) -> Dataset {
        gen_blobs(
            &BlobSpec {
                classes: 3,
                dim: 5,
                per_class: 40,
                spread: 0.6,
                radius: 1.0,
            },
            seed,
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            rounds: 3,
            local_epochs: 1,
            lr: 0.1,
            batch_size: 16,
            hidden: vec![6],
            seed: 5,
            workers: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn select_clients_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_clients(7, 1.0, &mut r), (0..7).collect::<Vec<_>>());
        let ids = select_clients(100, 0.1, &mut r);
        assert_eq!(ids.len(), 10);
        assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 10);
        assert_eq!(select_clients(5, 0.01, &mut r).len(), 1);
        let a = select_clients(50, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = select_clients(50, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m1 = random_mlp(&mut rng, &[3, 4, 2], Activation::Relu);
        let m2 = random_mlp(&mut rng, &[3, 4, 2], Activation::Relu);
        assert_eq!(aggregate(std::slice::from_ref(&m1), &[17]).unwrap(), m1);

        let mean = aggregate(&[m1.clone(), m2.clone()], &[5, 5]).unwrap();
        let weighted = aggregate(&[m1.clone(), m2.clone()], &[1, 3]).unwrap();
        for ((a, b), (m, w)) in m1
            .flatten()
            .iter()
            .zip(m2.flatten())
            .zip(mean.flatten().iter().zip(weighted.flatten()))
        {
            assert!((m - 0.5 * (a + b)).abs() <= 1e-12);
            assert!((w - (0.25 * a + 0.75 * b)).abs() <= 1e-12);
        }
        assert!(aggregate(&[], &[]).is_err());
        let other = random_mlp(&mut rng, &[3, 5, 2], Activation::Relu);
        assert!(aggregate(&[m1, other], &[1, 1]).is_err());
    }

    #[test]
    fn server_momentum_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = random_mlp(&mut rng, &[2, 3, 2], Activation::Tanh);
        let agg = random_mlp(&mut rng, &[2, 3, 2], Activation::Tanh);
        let out = ServerMomentum::default().step(&prev, &agg, 0.0).unwrap();
        for (a, b) in out.flatten().iter().zip(agg.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }

        // two rounds by hand: b1 = p0 - a0; x1 = p0 - b1; b2 = c b1 + (x1 - a1); x2 = x1 - b2
        let c = 0.9;
        let mut sm = ServerMomentum::default();
        let x1 = sm.step(&prev, &agg, c).unwrap();
        let a1 = random_mlp(&mut rng, &[2, 3, 2], Activation::Tanh);
        let x2 = sm.step(&x1, &a1, c).unwrap();
        for i in 0..prev.param_count() {
            let (p0, a0, a1v) = (prev.flatten()[i], agg.flatten()[i], a1.flatten()[i]);
            let b1 = p0 - a0;
            let x1v = p0 - b1;
            let b2 = c * b1 + (x1v - a1v);
            assert!((x2.flatten()[i] - (x1v - b2)).abs() < 1e-14);
        }

        // a fixed point makes the buffer decay geometrically
        let mut sm = ServerMomentum::default();
        let g1 = sm.step(&prev, &agg, 0.5).unwrap();
        let b1 = sm.buffer().unwrap().concat();
        sm.step(&g1, &g1, 0.5).unwrap();
        let b2 = sm.buffer().unwrap().concat();
        for (x, y) in b1.iter().zip(b2) {
            assert!((y - 0.5 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_alignment_cases() {
        let same = vec![vec![vec![1.0, 2.0]], vec![vec![1.0, 2.0]]];
        assert!((cosine_alignment(&same)[0].unwrap() - 1.0).abs() < 1e-15);
        let ortho = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        assert!((cosine_alignment(&ortho)[0].unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        let cancel = vec![vec![vec![1.0, -1.0]], vec![vec![-1.0, 1.0]]];
        assert_eq!(cosine_alignment(&cancel)[0], None);
        let zero_client = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0]]];
        assert_eq!(cosine_alignment(&zero_client)[0], None);
    }

    #[test]
    fn select_fa_layer_cases() {
        let z = [Some(0.9), Some(0.2), Some(0.5)];
        assert_eq!(select_fa_layer(&z, LayerStrategy::Lowest, 1), vec![1]);
        assert_eq!(select_fa_layer(&z, LayerStrategy::Highest, 1), vec![0]);
        assert_eq!(select_fa_layer(&z, LayerStrategy::Lowest, 2), vec![1, 2]);
        assert_eq!(
            select_fa_layer(&[Some(0.5), Some(0.5)], LayerStrategy::Lowest, 1),
            vec![0]
        );
        assert_eq!(select_fa_layer(&z, LayerStrategy::Fixed(2), 1), vec![2]);
        assert!(select_fa_layer(&z, LayerStrategy::None, 1).is_empty());
        assert!(select_fa_layer(&[None, None], LayerStrategy::Highest, 1).is_empty());
        assert_eq!(
            select_fa_layer(&[None, Some(0.1), Some(0.3)], LayerStrategy::Highest, 1),
            vec![2]
        );
    }

    #[test]
    fn config_validation_names_the_field() {
        let cfg = TrainConfig {
            client_fraction: 0.0,
            ..TrainConfig::default()
        };
        match cfg.validate().unwrap_err() {
            Error::InvalidConfig { field, .. } => assert_eq!(field, "client_fraction"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_local_steps_leaves_model_unchanged() {
        let ds = blobs(1);
        let shard = ClientShard {
            id: 0,
            indices: (0..10).collect(),
            histogram: vec![],
        };
        let cfg = TrainConfig {
            local_steps: Some(0),
            ..small_cfg()
        };
        let global = init_model(&cfg, &ds).unwrap();
        let r = local_train(&ds, &shard, &global, &cfg, &BTreeSet::new(), 0.1, 1).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(r.model, global);
    }

    #[test]
    fn fedprox_with_zero_mu_is_fedavg() {
        let ds = blobs(2);
        let p = partition_dirichlet(
            &ds,
            &PartitionSpec {
                clients: 3,
                beta: 0.5,
                seed: 1,
            },
        )
        .unwrap();
        let avg = run_training(&small_cfg(), &ds, None, &p).unwrap();
        let prox = run_training(
            &TrainConfig {
                algorithm: Algorithm::FedProx { mu: 0.0 },
                ..small_cfg()
            },
            &ds,
            None,
            &p,
        )
        .unwrap();
        assert_eq!(avg.model, prox.model);
        assert_eq!(avg.records, prox.records);
    }

    #[test]
    fn fedprox_pulls_toward_global() {
        let ds = blobs(2);
        let shard = ClientShard {
            id: 0,
            indices: (0..ds.len()).collect(),
            histogram: vec![],
        };
        let cfg = TrainConfig {
            local_epochs: 5,
            ..small_cfg()
        };
        let global = init_model(&cfg, &ds).unwrap();
        let dist = |m: &Mlp| {
            norm2(
                &m.flatten()
                    .iter()
                    .zip(global.flatten())
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            )
        };
        let free = local_train(&ds, &shard, &global, &cfg, &BTreeSet::new(), 0.1, 3).unwrap();
        let prox_cfg = TrainConfig {
            algorithm: Algorithm::FedProx { mu: 1.0 },
            ..cfg
        };
        let prox = local_train(&ds, &shard, &global, &prox_cfg, &BTreeSet::new(), 0.1, 3).unwrap();
        assert!(dist(&prox.model) < dist(&free.model));
    }

    #[test]
    fn empty_feedback_set_matches_bp_bitwise() {
        let ds = blobs(3);
        let p = partition_dirichlet(
            &ds,
            &PartitionSpec {
                clients: 4,
                beta: 0.3,
                seed: 2,
            },
        )
        .unwrap();
        let bp = run_training(
            &TrainConfig {
                layer_strategy: LayerStrategy::None,
                ..small_cfg()
            },
            &ds,
            None,
            &p,
        )
        .unwrap();
        let fa = run_training(
            &TrainConfig {
                backward: BackwardMode::Flfa(FeedbackMode::GlobalWeights),
                layer_strategy: LayerStrategy::None,
                ..small_cfg()
            },
            &ds,
            None,
            &p,
        )
        .unwrap();
        assert_eq!(bp.model, fa.model);
        assert_eq!(bp.records, fa.records);
    }

    #[test]
    fn first_round_is_identical_between_bp_and_flfa() {
        let ds = blobs(4);
        let p = partition_dirichlet(
            &ds,
            &PartitionSpec {
                clients: 4,
                beta: 0.3,
                seed: 3,
            },
        )
        .unwrap();
        let one = TrainConfig {
            rounds: 1,
            ..small_cfg()
        };
        let bp = run_training(&one, &ds, None, &p).unwrap();
        let fa = run_training(
            &TrainConfig {
                backward: BackwardMode::Flfa(FeedbackMode::GlobalWeights),
                ..one
            },
            &ds,
            None,
            &p,
        )
        .unwrap();
        assert_eq!(bp.records, fa.records);
    }

    #[test]
    fn flfa_first_step_of_each_round_equals_bp() {
        let ds = blobs(5);
        let p = partition_dirichlet(
            &ds,
            &PartitionSpec {
                clients: 3,
                beta: 0.5,
                seed: 4,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            rounds: 4,
            backward: BackwardMode::Flfa(FeedbackMode::GlobalWeights),
            initial_fa_layers: vec![1],
            ..small_cfg()
        };
        let out = run_training(&cfg, &ds, None, &p).unwrap();
        for r in &out.records {
            assert_eq!(r.grad_gap_start, Some(0.0));
            assert!(r.grad_gap_max.unwrap() > 0.0);
        }
    }

    #[test]
    fn iid_full_batch_round_equals_centralized_step() {
        let ds = blobs(6);
        let p = partition_iid(&ds, 4, 0).unwrap();
        let cfg = TrainConfig {
            rounds: 1,
            batch_size: ds.len(),
            momentum: 0.5,
            weight_decay: 0.01,
            ..small_cfg()
        };
        let global = init_model(&cfg, &ds).unwrap();
        let fed = run_training_from(&cfg, &ds, None, &p, global.clone()).unwrap();

        let mut central = global;
        let t = central.forward(&ds.features).unwrap();
        let (_, d) = cross_entropy(&t.output, &ds.labels).unwrap();
        let g = backward_bp(&central, &t, &d).unwrap();
        Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)
            .unwrap()
            .step(&mut central, &g)
            .unwrap();
        for (a, b) in fed.model.flatten().iter().zip(central.flatten()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn training_is_reproducible_across_worker_counts() {
        let ds = blobs(7);
        let p = partition_dirichlet(
            &ds,
            &PartitionSpec {
                clients: 5,
                beta: 0.3,
                seed: 5,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            backward: BackwardMode::Flfa(FeedbackMode::GlobalWeights),
            client_fraction: 0.6,
            ..small_cfg()
        };
        let a = run_training(&cfg, &ds, None, &p).unwrap();
        let b = run_training(&TrainConfig { workers: 1, ..cfg }, &ds, None, &p).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn traces_record_every_step() {
        let ds = blobs(8);
        let p = partition_iid(&ds, 2, 1).unwrap();
        let cfg = TrainConfig {
            rounds: 2,
            local_steps: Some(3),
            batch_size: 8,
            record_traces: true,
            backward: BackwardMode::Flfa(FeedbackMode::GlobalWeights),
            initial_fa_layers: vec![1],
            layer_strategy: LayerStrategy::Fixed(1),
            ..small_cfg()
        };
        let out = run_training(&cfg, &ds, None, &p).unwrap();
        assert_eq!(out.traces.len(), 2);
        for rt in &out.traces {
            assert_eq!(rt.clients.len(), 2);
            for c in &rt.clients {
                assert_eq!(c.steps.len(), 3);
                for s in &c.steps {
                    assert_eq!(s.inputs[0].cols(), 8);
                    assert_eq!(s.feedback_after.len(), 1);
                }
            }
        }
        let bad = TrainConfig {
            momentum: 0.9,
            ..cfg
        };
        assert!(run_training(&bad, &ds, None, &p).is_err());
    }

    #[test]
    fn updates_are_kept_on_request() {
        let ds = blobs(9);
        let p = partition_iid(&ds, 3, 1).unwrap();
        let cfg = TrainConfig {
            rounds: 1,
            keep_updates: true,
            ..small_cfg()
        };
        let out = run_training(&cfg, &ds, None, &p).unwrap();
        let r = &out.records[0];
        assert_eq!(r.updates.len(), 3);
        let flat: Vec<Vec<f64>> = r.updates.iter().map(ClientUpdate::flatten).collect();
        assert!((local_drift(&flat).unwrap() - r.drift).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn aggregate_stays_within_client_range(seed in 0u64..1000, sizes in proptest::collection::vec(1usize..50, 1..5)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<Mlp> = sizes.iter().map(|_| random_mlp(&mut rng, &[2, 3, 2], Activation::Relu)).collect();
            let agg = aggregate(&models, &sizes).unwrap().flatten();
            let flats: Vec<Vec<f64>> = models.iter().map(Mlp::flatten).collect();
            for (i, v) in agg.iter().enumerate() {
                let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
                let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn alignment_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let updates: Vec<Vec<Vec<f64>>> = (0..4)
                .map(|_| (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect();
            let scaled: Vec<Vec<Vec<f64>>> = updates
                .iter()
                .map(|u| u.iter().map(|l| l.iter().map(|v| v * scale).collect()).collect())
                .collect();
            for (a, b) in cosine_alignment(&updates).iter().zip(cosine_alignment(&scaled)) {
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }

        #[test]
        fn selection_ignores_constant_shift(values in proptest::collection::vec(-1.0f64..1.0, 1..6), shift in -5.0f64..5.0) {
            let z: Vec<Option<f64>> = values.iter().map(|&v| Some(v)).collect();
            let shifted: Vec<Option<f64>> = values.iter().map(|&v| Some(v + shift)).collect();
            for strategy in [LayerStrategy::Lowest, LayerStrategy::Highest] {
                let a = select_fa_layer(&z, strategy, 1);
                let b = select_fa_layer(&shifted, strategy, 1);
                // a shift can merge near-equal values; only compare when the extreme is unique after the shift
                let pick = |zz: &[Option<f64>], l: usize| zz[l].unwrap();
                prop_assert!(a == b || (pick(&shifted, a[0]) - pick(&shifted, b[0])).abs() < 1e-12);
            }
        }
    }
}
