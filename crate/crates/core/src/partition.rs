//! Client shards: grouping by a natural key (speaker, actor) or Dirichlet
//! label skew.
//!
//! Neither scheme looks at feature values. Assignment functions work on the
//! label/key columns alone and return index lists; the `*_partition` wrappers
//! move examples into shards.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("no examples to partition")]
    EmptyInput,
    #[error("example {0} has an empty client key")]
    EmptyKey(usize),
    #[error("infeasible partition: {0}")]
    InfeasibleSpec(&'static str),
    #[error("no draw in {0} attempts gave every client its minimum share")]
    RetryExhausted(usize),
    #[error("label {label} is not below the class count {n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureMatrix,
    pub label: usize,
}

pub type Shards = BTreeMap<String, Vec<Example>>;

/// Client shards plus the shared test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Shards,
    pub test_set: Vec<Example>,
    pub n_classes: usize,
}

impl FederatedDataset {
    /// Checks the label range and that no client is empty.
    pub fn new(clients: Shards, test_set: Vec<Example>, n_classes: usize) -> Result<Self, PartitionError> {
        for ex in clients.values().flatten().chain(&test_set) {
            if ex.label >= n_classes {
                return Err(PartitionError::LabelOutOfRange { label: ex.label, n_classes });
            }
        }
        if clients.is_empty() || clients.values().any(Vec::is_empty) {
            return Err(PartitionError::EmptyInput);
        }
        Ok(Self { clients, test_set, n_classes })
    }

    pub fn n_train(&self) -> usize {
        self.clients.values().map(Vec::len).sum()
    }

    pub fn client_ids(&self) -> Vec<String> {
        self.clients.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DirichletSpec {
    pub n_clients: usize,
    pub alpha: f64,
    pub min_per_client: usize,
    pub seed: u64,
}

impl DirichletSpec {
    pub fn new(n_clients: usize, alpha: f64, seed: u64) -> Self {
        Self { n_clients, alpha, min_per_client: 1, seed }
    }
}

pub const MAX_DIRICHLET_ATTEMPTS: usize = 100;

/// Groups example indices by key; the map iterates in key order.
pub fn group_by_key<K: AsRef<str>>(keys: &[K]) -> Result<BTreeMap<String, Vec<usize>>, PartitionError> {
    if keys.is_empty() {
        return Err(PartitionError::EmptyInput);
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        let k = k.as_ref();
        if k.is_empty() {
            return Err(PartitionError::EmptyKey(i));
        }
        groups.entry(String::from(k)).or_default().push(i);
    }
    Ok(groups)
}

/// One client per distinct key.
pub fn partition_by_key(examples: Vec<(FeatureMatrix, usize, String)>) -> Result<Shards, PartitionError> {
    let keys: Vec<&str> = examples.iter().map(|e| e.2.as_str()).collect();
    group_by_key(&keys)?;
    let mut shards = Shards::new();
    for (features, label, key) in examples {
        shards.entry(key).or_default().push(Example { features, label });
    }
    Ok(shards)
}

/// Label-skew Dirichlet assignment.
///
/// For every class independently, client proportions are drawn from a
/// symmetric Dirichlet (normalized Gamma(alpha, 1) variates) and each example
/// of that class is sent to a client by one categorical draw. A draw that
/// leaves some client below `min_per_client` is discarded and the whole
/// assignment redrawn from a fresh sub-seed.
pub fn dirichlet_assign(
    labels: &[usize],
    n_classes: usize,
    spec: &DirichletSpec,
) -> Result<Vec<Vec<usize>>, PartitionError> {
    if labels.is_empty() {
        return Err(PartitionError::EmptyInput);
    }
    if spec.n_clients == 0 {
        return Err(PartitionError::InfeasibleSpec("n_clients must be at least 1"));
    }
    if !(spec.alpha > 0.0) || !spec.alpha.is_finite() {
        return Err(PartitionError::InfeasibleSpec("alpha must be positive and finite"));
    }
    if labels.len() < spec.n_clients * spec.min_per_client {
        return Err(PartitionError::InfeasibleSpec("fewer examples than clients x min_per_client"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(PartitionError::LabelOutOfRange { label, n_classes });
    }
    let gamma =
        Gamma::new(spec.alpha, 1.0).map_err(|_| PartitionError::InfeasibleSpec("alpha must be positive and finite"))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for attempt in 0..MAX_DIRICHLET_ATTEMPTS {
        let mut r = rng::derived_stream(spec.seed, &[rng::TAG_PARTITION, attempt as u64]);
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); spec.n_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let cdf = dirichlet_cdf(&gamma, spec.n_clients, &mut r);
            for &i in members {
                let u: f64 = r.random();
                let c = cdf.partition_point(|&p| p <= u).min(spec.n_clients - 1);
                clients[c].push(i);
            }
        }
        if clients.iter().all(|c| c.len() >= spec.min_per_client) {
            clients.iter_mut().for_each(|c| c.sort_unstable());
            return Ok(clients);
        }
    }
    Err(PartitionError::RetryExhausted(MAX_DIRICHLET_ATTEMPTS))
}

/// Cumulative distribution of one Dirichlet draw.
fn dirichlet_cdf<R: Rng>(gamma: &Gamma<f64>, n: usize, r: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(r)).collect();
        let total: f64 = draws.iter().sum();
        // Small alpha can underflow every draw to zero.
        if total > 0.0 && total.is_finite() {
            let mut acc = 0.0;
            return draws
                .iter()
                .map(|g| {
                    acc += g / total;
                    acc
                })
                .collect();
        }
    }
}

pub fn client_name(i: usize) -> String {
    format!("client{i:03}")
}

/// Moves examples into Dirichlet shards named `client000`, `client001`, ...
pub fn dirichlet_partition(
    examples: Vec<Example>,
    n_classes: usize,
    spec: &DirichletSpec,
) -> Result<Shards, PartitionError> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let assignment = dirichlet_assign(&labels, n_classes, spec)?;
    let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(c, idx)| {
            let shard = idx.iter().map(|&i| slots[i].take().expect("index assigned twice")).collect();
            (client_name(c), shard)
        })
        .collect())
}

/// Per-class counts of one shard.
pub fn class_counts(labels: impl IntoIterator<Item = usize>, n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for l in labels {
        if l < n_classes {
            counts[l] += 1;
        }
    }
    counts
}

/// Shannon entropy (nats) of a count vector.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * libm::log(p)
        })
        .sum()
}

/// Mean over clients of the per-client label entropy.
pub fn mean_client_entropy(labels: &[usize], assignment: &[Vec<usize>], n_classes: usize) -> f64 {
    let total: f64 =
        assignment.iter().map(|idx| label_entropy(&class_counts(idx.iter().map(|&i| labels[i]), n_classes))).sum();
    total / assignment.len().max(1) as f64
}
