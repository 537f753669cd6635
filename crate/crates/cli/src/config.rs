//! Run configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedalign_core::data::{
    gen_blobs, load_csv, partition_dirichlet, partition_iid, BlobSpec, Dataset, Partition,
    PartitionSpec,
};
use fedalign_core::federation::TrainConfig;
use fedalign_core::{rng, Error};
use serde::{Deserialize, Serialize};

pub const ENV_SEED: &str = "FEDALIGN_SEED";
pub const ENV_OUTPUT_DIR: &str = "FEDALIGN_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; data, partition, model and client streams derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        test_fraction: f64,
    },
    Csv {
        path: PathBuf,
        /// Optional held-out file with the same layout.
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    /// Dirichlet concentration; omit for a uniform IID split.
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Record per-step traces and write the drift-bound report.
    pub trace: bool,
    /// Class compactness/separation of the final model's penultimate features.
    pub representation: bool,
    /// `Ĝ`, `σ̂`, `γ̂` at the final model.
    pub assumptions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Root seeds to pair; empty means just `seed`.
    pub seeds: Vec<u64>,
    /// Also run random feedback and no-rescale feedback.
    pub ablations: bool,
    /// First round (0-based) of the drift-reduction mean.
    pub drift_from: usize,
    /// Number of final rounds averaged for accuracy.
    pub final_window: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            seeds: Vec::new(),
            ablations: false,
            drift_from: 0,
            final_window: 10,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("malformed config")?;
        Ok(cfg)
    }

    /// Reads, applies environment overrides, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.seed = v
                .parse()
                .with_context(|| format!("{ENV_SEED}={v} is not an unsigned integer"))?;
        }
        if let Ok(v) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                dim,
                per_class,
                spread,
                radius,
                test_fraction,
            } => {
                if *classes < 2 {
                    bail!("dataset.classes: need at least 2 classes");
                }
                if *dim == 0 || *per_class == 0 {
                    bail!("dataset.dim and dataset.per_class must be positive");
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    bail!("dataset.spread: must be nonnegative");
                }
                if !(*radius >= 0.0 && radius.is_finite()) {
                    bail!("dataset.radius: must be nonnegative");
                }
                if !(0.0..1.0).contains(test_fraction) {
                    bail!("dataset.test_fraction: must lie in [0, 1)");
                }
            }
            DatasetConfig::Csv { .. } => {}
        }
        if self.partition.clients == 0 {
            bail!("partition.clients: must be at least 1");
        }
        if let Some(beta) = self.partition.beta {
            if !(beta > 0.0 && beta.is_finite()) {
                bail!("partition.beta: must be positive");
            }
        }
        if self.train.seed != 0 {
            bail!("train.seed: set the top-level `seed` instead");
        }
        if self.compare.final_window == 0 {
            bail!("compare.final_window: must be at least 1");
        }
        self.train_config(self.seed)
            .validate()
            .map_err(|e| match e {
                Error::InvalidConfig { field, reason } => {
                    anyhow::anyhow!("train.{field}: {reason}")
                }
                other => anyhow::anyhow!(other),
            })?;
        Ok(())
    }

    /// Training settings for one root seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            record_traces: self.train.record_traces || self.metrics.trace,
            ..self.train.clone()
        }
    }

    pub fn compare_seeds(&self) -> Vec<u64> {
        if self.compare.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.compare.seeds.clone()
        }
    }

    /// Train and evaluation sets. Without a held-out split both are the
    /// training data.
    pub fn load_data(&self, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                dim,
                per_class,
                spread,
                radius,
                test_fraction,
            } => {
                let spec = BlobSpec {
                    classes: *classes,
                    dim: *dim,
                    per_class: *per_class,
                    spread: *spread,
                    radius: *radius,
                };
                let ds = gen_blobs(&spec, rng::derive_seed(seed, &[rng::tag::DATA]))?;
                if *test_fraction > 0.0 {
                    let (train, test) =
                        ds.split(*test_fraction, rng::derive_seed(seed, &[rng::tag::SPLIT]))?;
                    Ok((train, Some(test)))
                } else {
                    Ok((ds, None))
                }
            }
            DatasetConfig::Csv { path, test_path } => {
                let train =
                    load_csv(path).with_context(|| format!("loading {}", path.display()))?;
                let test = match test_path {
                    Some(p) => {
                        Some(load_csv(p).with_context(|| format!("loading {}", p.display()))?)
                    }
                    None => None,
                };
                if let Some(t) = &test {
                    if t.dim() != train.dim() {
                        bail!(
                            "dataset.test_path: {} features, training data has {}",
                            t.dim(),
                            train.dim()
                        );
                    }
                }
                Ok((train, test))
            }
        }
    }

    pub fn make_partition(&self, train: &Dataset, seed: u64) -> Result<Partition> {
        let pseed = rng::derive_seed(seed, &[rng::tag::PARTITION]);
        Ok(match self.partition.beta {
            Some(beta) => partition_dirichlet(
                train,
                &PartitionSpec {
                    clients: self.partition.clients,
                    beta,
                    seed: pseed,
                },
            )?,
            None => partition_iid(train, self.partition.clients, pseed)?,
        })
    }
}
