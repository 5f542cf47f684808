//! Federation loop: client sampling, local training, FedAvg / FedOPT (server
//! Adam) aggregation and per-round evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use thiserror::Error;

use crate::metrics::{self, MetricError};
use crate::model::{self, LocalUpdate, ModelArch, ModelError, ParamVector, SgdConfig};
use crate::partition::{Example, FederatedDataset};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(&'static str),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("dataset has no clients")]
    NoClients,
    #[error("no updates to aggregate")]
    EmptyUpdates,
    #[error("update {0} has a sample count of zero")]
    ZeroCount(usize),
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("client {client}: {source}")]
    Client { client: String, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Optimizer {
    FedAvg,
    FedOpt,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::FedAvg => "fedavg",
            Optimizer::FedOpt => "fedopt",
        }
    }
}

pub const DEFAULT_SERVER_LR: f64 = 0.001;
pub const DEFAULT_ADAM_BETA1: f64 = 0.9;
pub const DEFAULT_ADAM_BETA2: f64 = 0.999;
pub const DEFAULT_ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FedConfig {
    #[cfg_attr(feature = "serde", serde(default = "defaults::optimizer"))]
    pub optimizer: Optimizer,
    pub rounds: usize,
    pub sample_ratio: f64,
    pub client_lr: f64,
    #[cfg_attr(feature = "serde", serde(default = "defaults::server_lr"))]
    pub server_lr: f64,
    #[cfg_attr(feature = "serde", serde(default = "defaults::beta1"))]
    pub adam_beta1: f64,
    #[cfg_attr(feature = "serde", serde(default = "defaults::beta2"))]
    pub adam_beta2: f64,
    #[cfg_attr(feature = "serde", serde(default = "defaults::eps"))]
    pub adam_eps: f64,
    #[cfg_attr(feature = "serde", serde(default = "defaults::epochs"))]
    pub epochs_per_round: usize,
    #[cfg_attr(feature = "serde", serde(default = "defaults::batch_size"))]
    pub batch_size: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub master_seed: u64,
}

#[cfg(feature = "serde")]
mod defaults {
    use super::*;

    pub fn optimizer() -> Optimizer {
        Optimizer::FedAvg
    }
    pub fn server_lr() -> f64 {
        DEFAULT_SERVER_LR
    }
    pub fn beta1() -> f64 {
        DEFAULT_ADAM_BETA1
    }
    pub fn beta2() -> f64 {
        DEFAULT_ADAM_BETA2
    }
    pub fn eps() -> f64 {
        DEFAULT_ADAM_EPS
    }
    pub fn epochs() -> usize {
        model::DEFAULT_LOCAL_EPOCHS
    }
    pub fn batch_size() -> usize {
        model::DEFAULT_BATCH_SIZE
    }
}

impl FedConfig {
    pub fn new(optimizer: Optimizer, rounds: usize, sample_ratio: f64, client_lr: f64, master_seed: u64) -> Self {
        Self {
            optimizer,
            rounds,
            sample_ratio,
            client_lr,
            server_lr: DEFAULT_SERVER_LR,
            adam_beta1: DEFAULT_ADAM_BETA1,
            adam_beta2: DEFAULT_ADAM_BETA2,
            adam_eps: DEFAULT_ADAM_EPS,
            epochs_per_round: model::DEFAULT_LOCAL_EPOCHS,
            batch_size: model::DEFAULT_BATCH_SIZE,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), FlError> {
        if self.rounds == 0 {
            return Err(FlError::InvalidConfig("rounds must be at least 1"));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(FlError::InvalidConfig("sample_ratio must be in (0, 1]"));
        }
        if !(self.client_lr >= 0.0 && self.client_lr.is_finite())
            || !(self.server_lr >= 0.0 && self.server_lr.is_finite())
        {
            return Err(FlError::InvalidConfig("learning rates must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(FlError::InvalidConfig("adam betas must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(FlError::InvalidConfig("adam_eps must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(FlError::InvalidConfig("batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.client_lr, epochs: self.epochs_per_round, batch_size: self.batch_size }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: ParamVector,
    pub adam_m: ParamVector,
    pub adam_v: ParamVector,
    pub step_count: u64,
}

impl ServerState {
    pub fn new(global_params: ParamVector) -> Self {
        let zeros = ParamVector::zeros_like(&global_params);
        Self { adam_m: zeros.clone(), adam_v: zeros, global_params, step_count: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundRecord {
    pub round: usize,
    pub sampled_clients: Vec<String>,
    pub mean_train_loss: f64,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
}

/// `max(1, round(ratio * n))`, capped at `n`.
pub fn n_sampled(n: usize, ratio: f64) -> usize {
    (libm::round(ratio * n as f64) as usize).clamp(1, n.max(1))
}

/// Uniform draw without replacement; the result keeps the input's order.
pub fn sample_clients(client_ids: &[String], ratio: f64, rng: &mut SimRng) -> Vec<String> {
    let n = client_ids.len();
    if n == 0 {
        return Vec::new();
    }
    let m = n_sampled(n, ratio);
    let mut picked = index::sample(rng, n, m).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| client_ids[i].clone()).collect()
}

/// Coordinate-wise `sum(n_i * p_i) / sum(n_i)`, reduced in list order.
pub fn fedavg_aggregate(updates: &[(ParamVector, usize)]) -> Result<ParamVector, FlError> {
    let (first, _) = updates.first().ok_or(FlError::EmptyUpdates)?;
    let mut total = 0usize;
    for (i, (p, n)) in updates.iter().enumerate() {
        if !p.same_layout(first) {
            return Err(FlError::LayoutMismatch);
        }
        if *n == 0 {
            return Err(FlError::ZeroCount(i));
        }
        total += n;
    }
    let mut out = ParamVector::zeros_like(first);
    for (p, n) in updates {
        let w = *n as f64 / total as f64;
        for (o, v) in out.values_mut().iter_mut().zip(p.values()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// One server Adam step on the pseudo-gradient `g = global - aggregated`.
pub fn fedopt_step(state: &ServerState, aggregated: &ParamVector, cfg: &FedConfig) -> Result<ServerState, FlError> {
    if !aggregated.same_layout(&state.global_params) {
        return Err(FlError::LayoutMismatch);
    }
    let mut next = state.clone();
    next.step_count += 1;
    let t = next.step_count as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - libm::pow(b1, t);
    let c2 = 1.0 - libm::pow(b2, t);
    let w = next.global_params.values_mut();
    let m = next.adam_m.values_mut();
    let v = next.adam_v.values_mut();
    for (i, &a) in aggregated.values().iter().enumerate() {
        let g = -(a - w[i]);
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let step = cfg.server_lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + cfg.adam_eps);
        w[i] -= step;
    }
    Ok(next)
}

/// Maps a function over independent work items. Implementations may run items
/// concurrently but must return results in input order.
pub trait Executor {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send;
}

/// Runs every item on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        items.into_iter().map(f).collect()
    }
}

pub fn round_stream(master_seed: u64, round: usize) -> SimRng {
    rng::derived_stream(master_seed, &[rng::TAG_ROUND, round as u64])
}

pub fn client_stream(master_seed: u64, round: usize, client: &str) -> SimRng {
    rng::derived_stream(master_seed, &[rng::TAG_CLIENT, round as u64, rng::key_hash(client)])
}

const EVAL_CHUNK: usize = 32;

/// Accuracy and macro-F1 of `params` on `test`.
pub fn evaluate<E: Executor>(
    params: &ParamVector,
    arch: &ModelArch,
    test: &[Example],
    exec: &E,
) -> Result<(f64, f64), FlError> {
    if test.is_empty() {
        return Err(FlError::EmptyTestSet);
    }
    let chunks: Vec<&[Example]> = test.chunks(EVAL_CHUNK).collect();
    let preds = exec.map(chunks, |chunk| {
        let inputs: Vec<_> = chunk.iter().map(|e| &e.features).collect();
        model::predict(params, arch, &inputs)
    });
    let mut predictions = Vec::with_capacity(test.len());
    for p in preds {
        predictions.extend(p?);
    }
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    Ok((metrics::accuracy(&predictions, &labels)?, metrics::macro_f1(&predictions, &labels, arch.n_classes())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationResult {
    pub records: Vec<RoundRecord>,
    pub state: ServerState,
}

impl FederationResult {
    pub fn final_params(&self) -> &ParamVector {
        &self.state.global_params
    }
}

/// Runs `cfg.rounds` rounds from Glorot-initialised parameters seeded by
/// `cfg.master_seed`. `on_round` sees each record as soon as it is produced.
pub fn run_federation<E: Executor>(
    dataset: &FederatedDataset,
    arch: &ModelArch,
    cfg: &FedConfig,
    exec: &E,
    on_round: impl FnMut(&RoundRecord),
) -> Result<FederationResult, FlError> {
    let init = model::init_params(arch, cfg.master_seed)?;
    run_federation_from(ServerState::new(init), dataset, arch, cfg, exec, on_round)
}

pub fn run_federation_from<E: Executor>(
    mut state: ServerState,
    dataset: &FederatedDataset,
    arch: &ModelArch,
    cfg: &FedConfig,
    exec: &E,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<FederationResult, FlError> {
    cfg.validate()?;
    arch.validate()?;
    if dataset.test_set.is_empty() {
        return Err(FlError::EmptyTestSet);
    }
    let ids = dataset.client_ids();
    if ids.is_empty() {
        return Err(FlError::NoClients);
    }
    let sgd = cfg.sgd();
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let sampled = sample_clients(&ids, cfg.sample_ratio, &mut round_stream(cfg.master_seed, round));
        let global = &state.global_params;
        let jobs: Vec<&String> = sampled.iter().collect();
        let results = exec.map(jobs, |id| {
            let shard = &dataset.clients[id];
            let mut r = client_stream(cfg.master_seed, round, id);
            model::local_train_with_rng(global, arch, shard, &sgd, &mut r).map(|u| (u, shard.len()))
        });
        let mut updates: Vec<(ParamVector, usize)> = Vec::with_capacity(results.len());
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (id, res) in sampled.iter().zip(results) {
            let (LocalUpdate { params, mean_loss }, n) =
                res.map_err(|source| FlError::Client { client: id.clone(), source })?;
            loss_sum += mean_loss * n as f64;
            seen += n;
            updates.push((params, n));
        }
        let aggregated = fedavg_aggregate(&updates)?;
        state = match cfg.optimizer {
            Optimizer::FedAvg => ServerState { global_params: aggregated, ..state },
            Optimizer::FedOpt => fedopt_step(&state, &aggregated, cfg)?,
        };
        let (test_accuracy, test_macro_f1) = evaluate(&state.global_params, arch, &dataset.test_set, exec)?;
        let record = RoundRecord {
            round,
            sampled_clients: sampled,
            mean_train_loss: loss_sum / seen as f64,
            test_accuracy,
            test_macro_f1,
        };
        on_round(&record);
        records.push(record);
    }
    Ok(FederationResult { records, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TensorSpec;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn scalar(v: f64) -> ParamVector {
        let layout = vec![TensorSpec { name: "w".into(), shape: vec![1], offset: 0 }];
        ParamVector::new(layout, vec![v]).unwrap()
    }

    fn vector(values: Vec<f64>) -> ParamVector {
        let layout = vec![TensorSpec { name: "w".into(), shape: vec![values.len()], offset: 0 }];
        ParamVector::new(layout, values).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(crate::partition::client_name).collect()
    }

    #[test]
    fn sampled_counts() {
        assert_eq!(n_sampled(2112, 0.05), 106);
        assert_eq!(n_sampled(2112, 0.10), 211);
        assert_eq!(n_sampled(10, 0.01), 1);
        assert_eq!(n_sampled(7, 1.0), 7);
        let all = ids(13);
        for seed in 0..5 {
            assert_eq!(sample_clients(&all, 1.0, &mut rng::stream(seed)), all);
        }
    }

    #[test]
    fn sampling_is_distinct_and_sorted() {
        let all = ids(50);
        let s = sample_clients(&all, 0.3, &mut rng::stream(4));
        assert_eq!(s.len(), 15);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn selection_frequency_concentrates() {
        let all = ids(20);
        let rounds = 10_000;
        let mut hits = vec![0usize; 20];
        for r in 0..rounds {
            for id in sample_clients(&all, 0.5, &mut round_stream(11, r)) {
                hits[all.iter().position(|x| *x == id).unwrap()] += 1;
            }
        }
        let sigma = (0.25f64 / rounds as f64).sqrt();
        for h in hits {
            assert!((h as f64 / rounds as f64 - 0.5).abs() <= 3.0 * sigma, "{h}");
        }
    }

    #[test]
    fn round_overlap_matches_hypergeometric() {
        // Two independent 10-of-20 draws share 5 clients on average.
        let all = ids(20);
        let rounds = 1000;
        let overlaps: Vec<f64> = (0..rounds)
            .map(|r| {
                let a = sample_clients(&all, 0.5, &mut round_stream(3, 2 * r));
                let b = sample_clients(&all, 0.5, &mut round_stream(3, 2 * r + 1));
                a.iter().filter(|x| b.contains(x)).count() as f64
            })
            .collect();
        let mean = overlaps.iter().sum::<f64>() / rounds as f64;
        // Var = m * (m/N) * ((N-m)/N) * ((N-m)/(N-1)) with N = 20, m = 10.
        let var = 10.0 * 0.5 * 0.5 * (10.0 / 19.0);
        assert!((mean - 5.0).abs() <= 3.0 * (var / rounds as f64).sqrt(), "{mean}");
    }

    #[test]
    fn fedavg_examples() {
        let a = fedavg_aggregate(&[(vector(vec![1.0, 2.0]), 5), (vector(vec![3.0, 4.0]), 5)]).unwrap();
        assert_eq!(a.values(), &[2.0, 3.0]);
        let b = fedavg_aggregate(&[(scalar(0.0), 1), (scalar(4.0), 3)]).unwrap();
        assert_eq!(b.values(), &[3.0]);
        assert_eq!(fedavg_aggregate(&[]), Err(FlError::EmptyUpdates));
        assert_eq!(fedavg_aggregate(&[(scalar(1.0), 0)]), Err(FlError::ZeroCount(0)));
        assert_eq!(fedavg_aggregate(&[(scalar(1.0), 1), (vector(vec![1.0, 2.0]), 1)]), Err(FlError::LayoutMismatch));
    }

    #[test]
    fn fedavg_matches_oracle_and_is_order_free() {
        let mut r = SimRng::seed_from_u64(7);
        let updates: Vec<(ParamVector, usize)> = (0..7)
            .map(|_| (vector((0..11).map(|_| r.random_range(-3.0..3.0)).collect()), r.random_range(1..50)))
            .collect();
        let got = fedavg_aggregate(&updates).unwrap();
        let total: usize = updates.iter().map(|u| u.1).sum();
        for j in 0..11 {
            let num: f64 = updates.iter().map(|(p, n)| *n as f64 * p.values()[j]).sum();
            assert!((got.values()[j] - num / total as f64).abs() < 1e-12);
        }
        let mut reversed = updates.clone();
        reversed.reverse();
        let other = fedavg_aggregate(&reversed).unwrap();
        for (a, b) in got.values().iter().zip(other.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = fedavg_aggregate(&[(updates[0].0.clone(), 3), (updates[0].0.clone(), 9)]).unwrap();
        for (a, b) in same.values().iter().zip(updates[0].0.values()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fedopt_zero_delta_is_noop() {
        let cfg = FedConfig::new(Optimizer::FedOpt, 1, 1.0, 0.1, 0);
        let s = ServerState::new(vector(vec![0.5, -2.0]));
        let next = fedopt_step(&s, &s.global_params, &cfg).unwrap();
        assert_eq!(next.global_params, s.global_params);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn fedopt_first_step_closed_form() {
        let cfg = FedConfig::new(Optimizer::FedOpt, 1, 1.0, 0.1, 0);
        assert_eq!(cfg.server_lr, 0.001);
        for d in [0.3, -0.02, 5.0] {
            let s = ServerState::new(scalar(1.0));
            let next = fedopt_step(&s, &scalar(1.0 + d), &cfg).unwrap();
            let moved = next.global_params.values()[0] - 1.0;
            let expected = cfg.server_lr * d.abs() / (d.abs() + cfg.adam_eps);
            assert!((moved.abs() - expected).abs() < 1e-15);
            assert_eq!(moved.signum(), d.signum());
        }
    }

    #[test]
    fn fedopt_zero_server_lr_freezes_params() {
        let mut cfg = FedConfig::new(Optimizer::FedOpt, 1, 1.0, 0.1, 0);
        cfg.server_lr = 0.0;
        let mut s = ServerState::new(vector(vec![0.1, 0.2, 0.3]));
        let start = s.global_params.clone();
        for k in 0..5 {
            s = fedopt_step(&s, &vector(vec![k as f64, -1.0, 7.0]), &cfg).unwrap();
        }
        assert_eq!(s.global_params, start);
        assert_eq!(s.step_count, 5);
    }

    #[test]
    fn config_validation() {
        let ok = FedConfig::new(Optimizer::FedAvg, 3, 0.5, 0.1, 0);
        assert!(ok.validate().is_ok());
        assert!(FedConfig { rounds: 0, ..ok.clone() }.validate().is_err());
        assert!(FedConfig { sample_ratio: 0.0, ..ok.clone() }.validate().is_err());
        assert!(FedConfig { sample_ratio: 1.5, ..ok.clone() }.validate().is_err());
        assert!(FedConfig { client_lr: -1.0, ..ok.clone() }.validate().is_err());
        assert_eq!((ok.batch_size, ok.epochs_per_round), (16, 1));
    }
}
