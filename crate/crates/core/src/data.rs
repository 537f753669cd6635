//! Synthetic datasets, CSV loading, and Dirichlet label-skew partitioning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Features are stored one sample per column (`dim x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if features.cols() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_columns(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Stratified hold-out split. Every class keeps at least one training
    /// sample.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("test_fraction", "must lie in [0, 1)"));
        }
        let mut rng = rng::stream(seed, &[rng::tag::SPLIT]);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for mut idx in self.indices_by_class() {
            idx.shuffle(&mut rng);
            let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
            let n_test = n_test.min(idx.len().saturating_sub(1));
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        let (xf, yf) = self.subset(&train);
        let train_ds = Dataset::new(xf, yf, self.classes)?;
        let (xt, yt) = self.subset(&test);
        let test_ds = Dataset::new(xt, yt, self.classes)?;
        Ok((train_ds, test_ds))
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of the isotropic noise around each centroid.
    pub spread: f64,
    /// Distance of every centroid from the origin.
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_radius() -> f64 {
    1.0
}

/// Gaussian clusters with one centroid per class at random points on a
/// sphere of the given radius. Samples are laid out class by class.
pub fn gen_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::config(
            "per_class",
            "per_class and dim must be positive",
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::config(
            "spread",
            "must be a finite nonnegative number",
        ));
    }
    let mut rng = rng::stream(seed, &[rng::tag::DATA]);
    let centroids: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = crate::matrix::norm2(&v).max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * spec.radius / n).collect()
        })
        .collect();
    let n = spec.classes * spec.per_class;
    let mut features = Matrix::zeros(spec.dim, n);
    let mut labels = Vec::with_capacity(n);
    for (c, centroid) in centroids.iter().enumerate() {
        for k in 0..spec.per_class {
            let col = c * spec.per_class + k;
            for (d, &mu) in centroid.iter().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                features.set(d, col, mu + spec.spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, spec.classes)
}

/// Reads header-less CSV rows of the form `label,f1,...,fd`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())
        .map_err(|e| Error::Io(e.to_string()))?;
    let mut labels = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let mut fields = record.iter();
        let label: usize = fields
            .next()
            .ok_or_else(|| Error::Parse(format!("row {}: empty", line + 1)))?
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("row {}: label is not a class index", line + 1)))?;
        let feats = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("row {}: {e}", line + 1)))?;
        if let Some(first) = columns.first() {
            if first.len() != feats.len() {
                return Err(Error::Parse(format!(
                    "row {}: expected {} features",
                    line + 1,
                    first.len()
                )));
            }
        }
        labels.push(label);
        columns.push(feats);
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv file"));
    }
    let dim = columns[0].len();
    let features = Matrix::from_vec(
        dim,
        columns.len(),
        (0..dim)
            .flat_map(|d| columns.iter().map(move |c| c[d]))
            .collect(),
    )?;
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(features, labels, classes.max(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Dirichlet concentration; smaller is more skewed.
    pub beta: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientShard {
    pub id: usize,
    pub indices: Vec<usize>,
    pub histogram: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Per-epoch shuffled mini-batches; the last one may be partial.
    pub fn batches(&self, ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Vec<Batch> {
        let mut order = self.indices.clone();
        let mut rng = rng::stream(epoch_seed, &[]);
        order.shuffle(&mut rng);
        order
            .chunks(batch_size.max(1))
            .map(|chunk| Batch::gather(ds, chunk))
            .collect()
    }

    /// Label entropy in nats.
    pub fn label_entropy(&self) -> f64 {
        let n = self.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        self.histogram
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn gather(ds: &Dataset, indices: &[usize]) -> Batch {
        let (features, labels) = ds.subset(indices);
        Batch { features, labels }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    /// Clients that received no samples.
    pub empty_clients: Vec<usize>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(ClientShard::len).collect()
    }

    /// `{client_id: [indices]}` as JSON.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<usize, &Vec<usize>> =
            self.shards.iter().map(|s| (s.id, &s.indices)).collect();
        serde_json::to_string_pretty(&map).expect("partition serializes")
    }

    pub fn mean_label_entropy(&self) -> f64 {
        let non_empty: Vec<&ClientShard> = self.shards.iter().filter(|s| !s.is_empty()).collect();
        if non_empty.is_empty() {
            return 0.0;
        }
        non_empty.iter().map(|s| s.label_entropy()).sum::<f64>() / non_empty.len() as f64
    }
}

/// Splits `total` items in proportion to `weights` using largest-remainder
/// rounding, so the counts always sum to `total`. Ties go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum.is_nan() || sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws `ρ ~ Dir(β·1_n)` by normalizing independent `Gamma(β, 1)` draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(beta: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every draw underflowed: all mass on one uniformly chosen client
        let mut out = vec![0.0; n];
        out[rng.random_range(0..n)] = 1.0;
        out
    }
}

/// Per class, draws client proportions from `Dir(β·1_N)` and deals that
/// class's (shuffled) samples out accordingly.
pub fn partition_dirichlet(ds: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    if spec.clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    if !(spec.beta > 0.0 && spec.beta.is_finite()) {
        return Err(Error::config("beta", "must be positive"));
    }
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = rng::stream(spec.seed, &[rng::tag::PARTITION]);
    let mut shards: Vec<ClientShard> = (0..spec.clients)
        .map(|id| ClientShard {
            id,
            indices: Vec::new(),
            histogram: vec![0; ds.classes],
        })
        .collect();
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        let rho = sample_dirichlet(spec.beta, spec.clients, &mut rng);
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), &rho);
        let mut start = 0;
        for (shard, count) in shards.iter_mut().zip(counts) {
            shard.indices.extend_from_slice(&idx[start..start + count]);
            shard.histogram[class] += count;
            start += count;
        }
    }
    for s in &mut shards {
        s.indices.sort_unstable();
    }
    let empty_clients = shards
        .iter()
        .filter(|s| s.is_empty())
        .map(|s| s.id)
        .collect();
    Ok(Partition {
        shards,
        empty_clients,
    })
}

/// Equal-size random split, used as the homogeneous reference.
pub fn partition_iid(ds: &Dataset, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    let mut rng = rng::stream(seed, &[rng::tag::PARTITION]);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    let counts = largest_remainder(idx.len(), &vec![1.0; clients]);
    let mut start = 0;
    let shards: Vec<ClientShard> = counts
        .into_iter()
        .enumerate()
        .map(|(id, c)| {
            let mut indices = idx[start..start + c].to_vec();
            start += c;
            indices.sort_unstable();
            let mut histogram = vec![0; ds.classes];
            for &i in &indices {
                histogram[ds.labels[i]] += 1;
            }
            ClientShard {
                id,
                indices,
                histogram,
            }
        })
        .collect();
    let empty_clients = shards
        .iter()
        .filter(|s| s.is_empty())
        .map(|s| s.id)
        .collect();
    Ok(Partition {
        shards,
        empty_clients,
    })
}
