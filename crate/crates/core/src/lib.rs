//! Simulation core for federated audio classification.
//!
//! Everything in this crate is deterministic, allocation-only and free of IO so
//! it builds for `no_std` targets. File formats, configuration and the CLI live
//! in the `fedaudio-sim` companion crate.
//!
//! The pipeline, in the order an experiment applies it:
//!
//! * [`audio`]: clip types and the seeded synthetic corpus,
//! * [`corruption`]: additive white Gaussian noise at a target SNR and
//!   transition-matrix label errors,
//! * [`features`]: Hamming-windowed power spectra, Mel filterbank, log-Mel
//!   extraction, segmentation and z-normalization,
//! * [`partition`]: natural-key and Dirichlet label-skew client shards,
//! * [`model`]: an MLP and a conv+GRU classifier with hand-written backprop,
//! * [`fl`]: client sampling, FedAvg, the Adam server step and the round loop,
//! * [`metrics`]: accuracy, macro-F1, summaries and round-to-target.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod audio;
pub mod corruption;
pub mod features;
pub mod fl;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod rng;

pub use audio::{AudioClip, LabeledClip, SynthCorpusSpec};
pub use corruption::{LabelErrorSpec, NoiseSpec, TransitionMatrix};
pub use features::{FeatureConfig, FeatureMatrix, NormStats};
pub use fl::{FedConfig, Optimizer, RoundRecord, ServerState};
pub use metrics::{MetricSummary, RoundToTarget};
pub use model::{ArchKind, ModelArch, ParamVector};
pub use partition::{DirichletSpec, Example, FederatedDataset};
