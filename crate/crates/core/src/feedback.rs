//! Feedback matrices for the feedback-alignment backward pass.
//!
//! In [`FeedbackMode::GlobalWeights`] each client starts a round with
//! `B_l = W_l` copied from the global model and, after every local update,
//! rescales it to `(‖w_l‖_F / ‖W_l‖_F) · W_l`: the global direction with the
//! local norm. The other modes are ablations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{init_weight, Mlp};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Round-start global weights, rescaled to the local norm after each batch.
    GlobalWeights,
    /// A random matrix sampled once per run and per layer, never rescaled.
    RandomFixed,
    /// Round-start global weights, never rescaled.
    GlobalNoRescale,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    matrix: Matrix,
    /// Round-start global weight. Rescaling always starts from this, never
    /// from the current matrix.
    reference: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackSet {
    mode: FeedbackMode,
    entries: BTreeMap<usize, Entry>,
    warnings: Vec<String>,
}

impl FeedbackSet {
    /// Builds feedback matrices for `layers` (0-based) of `global`.
    ///
    /// `seed` is only used by [`FeedbackMode::RandomFixed`]; the matrix for
    /// layer `l` depends on `(seed, l)` alone so it stays fixed across rounds
    /// and clients of a run.
    pub fn init(
        global: &Mlp,
        layers: &BTreeSet<usize>,
        mode: FeedbackMode,
        seed: u64,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for &l in layers {
            if l >= global.layer_count() {
                return Err(Error::InvalidLayer {
                    index: l,
                    layers: global.layer_count(),
                });
            }
            let w = &global.layer(l).weight;
            let matrix = match mode {
                FeedbackMode::GlobalWeights | FeedbackMode::GlobalNoRescale => w.clone(),
                FeedbackMode::RandomFixed => {
                    let mut r = rng::stream(seed, &[rng::tag::FEEDBACK, l as u64]);
                    init_weight(w.rows(), w.cols(), &mut r)
                }
            };
            entries.insert(
                l,
                Entry {
                    matrix,
                    reference: w.clone(),
                },
            );
        }
        Ok(FeedbackSet {
            mode,
            entries,
            warnings: Vec::new(),
        })
    }

    pub fn mode(&self) -> FeedbackMode {
        self.mode
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn matrix(&self, layer: usize) -> Option<&Matrix> {
        self.entries.get(&layer).map(|e| &e.matrix)
    }

    pub fn reference(&self, layer: usize) -> Option<&Matrix> {
        self.entries.get(&layer).map(|e| &e.reference)
    }

    /// Degenerate-layer warnings collected by [`FeedbackSet::rescale`].
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Checks that every feedback layer exists in `model` with the same shape.
    pub fn validate_against(&self, model: &Mlp) -> Result<()> {
        for (&l, e) in &self.entries {
            if l >= model.layer_count() {
                return Err(Error::InvalidLayer {
                    index: l,
                    layers: model.layer_count(),
                });
            }
            let w = &model.layer(l).weight;
            if e.matrix.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "feedback matrix",
                    left: w.shape(),
                    right: e.matrix.shape(),
                });
            }
        }
        Ok(())
    }

    /// `B_l ← (‖w_l‖_F / ‖W_l‖_F) · W_l` for every feedback layer. A no-op
    /// outside [`FeedbackMode::GlobalWeights`]. Layers whose reference has
    /// zero norm are skipped and a warning is recorded.
    pub fn rescale(&mut self, local: &Mlp) -> Result<()> {
        if self.mode != FeedbackMode::GlobalWeights {
            return Ok(());
        }
        self.validate_against(local)?;
        let warnings = &mut self.warnings;
        for (&l, e) in self.entries.iter_mut() {
            let ref_norm = e.reference.frobenius_norm();
            if ref_norm == 0.0 {
                warnings.push(format!(
                    "layer {l}: global weight has zero norm, feedback not rescaled"
                ));
                continue;
            }
            let ratio = local.layer(l).weight.frobenius_norm() / ref_norm;
            e.matrix = e.reference.scale(ratio);
        }
        Ok(())
    }
}
