//! Dense multilayer perceptron with a hand-written backward pass.
//!
//! Layer `l` computes `z_l = w_l h_l + b_l` and `h_{l+1} = f(z_l)`, with
//! samples stored as columns. The backward pass can propagate the error
//! through the transposed forward weights (backpropagation) or through
//! feedback matrices supplied by a [`FeedbackSet`] for selected layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::FeedbackSet;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation. ReLU'(0) is 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "dense layer bias",
                left: weight.shape(),
                right: (bias.len(), 1),
            });
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

/// Glorot-uniform weight matrix. Also used to sample random feedback
/// matrices, so both come from the same family.
pub fn init_weight<R: Rng + ?Sized>(outputs: usize, inputs: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
    Matrix::random_uniform(outputs, inputs, limit, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Values recorded by [`Mlp::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `h_l`, the input of every layer; `inputs[0]` is the batch itself.
    pub inputs: Vec<Matrix>,
    /// `z_l`, the pre-activation of every layer.
    pub pre_activations: Vec<Matrix>,
    pub output: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.output.cols()
    }
}

/// Per-layer gradients, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(model: &Mlp) -> Self {
        GradSet {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.outputs(), l.inputs()))
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.outputs()])
                .collect(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Weights then bias of one layer, concatenated.
    pub fn layer_flat(&self, layer: usize) -> Vec<f64> {
        let mut v = self.weights[layer].as_slice().to_vec();
        v.extend_from_slice(&self.biases[layer]);
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        (0..self.layer_count())
            .flat_map(|l| self.layer_flat(l))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.max_abs() == 0.0)
            && self.biases.iter().flatten().all(|&b| b == 0.0)
    }
}

/// Result of a backward pass that also keeps the per-layer error signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Backward {
    pub grads: GradSet,
    /// `δ_l` for every layer, `out_l x batch`.
    pub deltas: Vec<Matrix>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("model has no layers"));
        }
        for pair in layers.windows(2) {
            if pair[1].inputs() != pair[0].outputs() {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Random model with the given layer widths, e.g. `[20, 32, 5]`.
    /// Hidden layers use `hidden`; the output layer is linear.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config(
                "sizes",
                "need at least input and output width",
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::config("sizes", "layer widths must be positive"));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                weight: init_weight(w[1], w[0], rng),
                bias: vec![0.0; w[1]],
                activation: if i == last {
                    Activation::Identity
                } else {
                    hidden
                },
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &DenseLayer {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut DenseLayer {
        &mut self.layers[l]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub fn layer_flat(&self, l: usize) -> Vec<f64> {
        let layer = &self.layers[l];
        let mut v = layer.weight.as_slice().to_vec();
        v.extend_from_slice(&layer.bias);
        v
    }

    /// Overwrites one layer from a weights-then-bias slice.
    pub fn set_layer_flat(&mut self, l: usize, values: &[f64]) -> Result<()> {
        let layer = &mut self.layers[l];
        let n_w = layer.weight.len();
        if values.len() != n_w + layer.bias.len() {
            return Err(Error::ShapeMismatch {
                op: "set_layer_flat",
                left: layer.weight.shape(),
                right: (values.len(), 1),
            });
        }
        layer.weight.as_mut_slice().copy_from_slice(&values[..n_w]);
        layer.bias.copy_from_slice(&values[n_w..]);
        Ok(())
    }

    /// All parameters, layer by layer (weights row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        (0..self.layers.len())
            .flat_map(|l| self.layer_flat(l))
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.rows() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: self.layers[0].weight.shape(),
                right: x.shape(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = layer.weight.matmul(&h)?;
            z.add_column_broadcast(&layer.bias)?;
            let act = layer.activation;
            let next = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations: pre,
            output: h,
        })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.output)
    }

    /// Penultimate-layer features: the input of the last layer.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let mut trace = self.forward(x)?;
        Ok(trace.inputs.pop().expect("model has at least one layer"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SerializedModel::from(self)).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: SerializedModel =
            serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        m.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct SerializedLayer {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SerializedModel {
    layers: Vec<SerializedLayer>,
}

impl From<&Mlp> for SerializedModel {
    fn from(m: &Mlp) -> Self {
        SerializedModel {
            layers: m
                .layers
                .iter()
                .map(|l| SerializedLayer {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weight: l.weight.as_slice().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<SerializedModel> for Mlp {
    type Error = Error;

    fn try_from(m: SerializedModel) -> Result<Self> {
        let layers = m
            .layers
            .into_iter()
            .map(|l| {
                let w = Matrix::from_vec(l.outputs, l.inputs, l.weight)?;
                DenseLayer::new(w, l.bias, l.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }
}

/// Backpropagation gradients.
pub fn backward_bp(model: &Mlp, trace: &ForwardTrace, dlogits: &Matrix) -> Result<GradSet> {
    Ok(backward(model, None, trace, dlogits)?.grads)
}

/// Feedback-alignment gradients: for every layer `l` in the feedback set the
/// error sent down to layer `l - 1` is `B_lᵀ δ_l` instead of `w_lᵀ δ_l`.
pub fn backward_fa(
    model: &Mlp,
    feedback: &FeedbackSet,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<GradSet> {
    Ok(backward(model, Some(feedback), trace, dlogits)?.grads)
}

/// Shared backward pass. `dlogits` is the loss gradient with respect to the
/// model output and already carries any batch averaging, so `dW_l = δ_l h_lᵀ`
/// and `db_l` is the row sum of `δ_l`.
pub fn backward(
    model: &Mlp,
    feedback: Option<&FeedbackSet>,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<Backward> {
    let n_layers = model.layer_count();
    if trace.inputs.len() != n_layers || trace.pre_activations.len() != n_layers {
        return Err(Error::TraceMismatch(format!(
            "trace has {} layers, model has {}",
            trace.inputs.len(),
            n_layers
        )));
    }
    if dlogits.shape() != trace.output.shape() {
        return Err(Error::ShapeMismatch {
            op: "backward dlogits",
            left: trace.output.shape(),
            right: dlogits.shape(),
        });
    }
    if let Some(fb) = feedback {
        fb.validate_against(model)?;
    }

    let mut deltas = vec![Matrix::zeros(0, 0); n_layers];
    let mut grads = GradSet::zeros_like(model);

    let last = n_layers - 1;
    let act = model.layers[last].activation;
    let mut delta = if act == Activation::Identity {
        dlogits.clone()
    } else {
        dlogits.hadamard(&trace.pre_activations[last].map(|z| act.derivative(z)))?
    };

    for l in (0..n_layers).rev() {
        grads.weights[l] = delta.matmul_t(&trace.inputs[l])?;
        grads.biases[l] = delta.row_sums();
        if l > 0 {
            let down = feedback
                .and_then(|fb| fb.matrix(l))
                .unwrap_or(&model.layers[l].weight);
            let below = model.layers[l - 1].activation;
            let fprime = trace.pre_activations[l - 1].map(|z| below.derivative(z));
            let next = down.t_matmul(&delta)?.hadamard(&fprime)?;
            deltas[l] = std::mem::replace(&mut delta, next);
        } else {
            deltas[0] = std::mem::replace(&mut delta, Matrix::zeros(0, 0));
        }
    }

    Ok(Backward { grads, deltas })
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (classes, batch) = logits.shape();
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy labels",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if batch == 0 {
        return Err(Error::Empty("cross_entropy batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let mut grad = Matrix::zeros(classes, batch);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (c, &label) in labels.iter().enumerate() {
        let max = (0..classes)
            .map(|r| logits.get(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..classes).map(|r| (logits.get(r, c) - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - logits.get(label, c);
        for r in 0..classes {
            let p = (logits.get(r, c) - log_sum).exp();
            let target = if r == label { 1.0 } else { 0.0 };
            grad.set(r, c, (p - target) * inv_b);
        }
    }
    Ok((loss * inv_b, grad))
}

/// Column-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let (classes, batch) = logits.shape();
    let mut out = Matrix::zeros(classes, batch);
    for c in 0..batch {
        let max = (0..classes)
            .map(|r| logits.get(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..classes).map(|r| (logits.get(r, c) - max).exp()).sum();
        for r in 0..classes {
            out.set(r, c, (logits.get(r, c) - max).exp() / sum);
        }
    }
    out
}

/// Fraction of columns whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(c, &y)| {
            let mut best = 0;
            for r in 1..logits.rows() {
                if logits.get(r, c) > logits.get(best, c) {
                    best = r;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + g + decay * w; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<GradSet>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &GradSet) -> Result<()> {
        if grads.layer_count() != model.layer_count() {
            return Err(Error::TraceMismatch("gradient layer count".into()));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| GradSet::zeros_like(model));
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads.weights[l];
            let v = &mut velocity.weights[l];
            if g.shape() != layer.weight.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    left: layer.weight.shape(),
                    right: g.shape(),
                });
            }
            for ((vi, &gi), wi) in v
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(layer.weight.as_mut_slice())
            {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
            let gb = &grads.biases[l];
            if gb.len() != layer.bias.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step bias",
                    left: (layer.bias.len(), 1),
                    right: (gb.len(), 1),
                });
            }
            for ((vi, &gi), bi) in velocity.biases[l]
                .iter_mut()
                .zip(gb)
                .zip(layer.bias.iter_mut())
            {
                *vi = self.momentum * *vi + gi + self.weight_decay * *bi;
                *bi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
