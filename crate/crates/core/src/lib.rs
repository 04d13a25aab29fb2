//! Federated learning over client data streams: weighted FedAvg with bounded
//! client memories, the generalization bound it induces, and the optimizer that
//! picks client importance weights from that bound.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod bounds;
pub mod error;
pub mod experiment;
pub mod memory;
pub mod model;
pub mod par;
pub mod rng;
pub mod stream;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use memory::{MemoryRule, MemoryState, Tagged};
pub use model::{Domain, Example, LossKind, LossSpec, Model, ParameterVector, SampleMeta};
pub use par::Exec;
pub use stream::{ClientStream, CountingProcess, SampleSource, SyntheticSpec};
pub use weighting::{ImportanceVector, RoundTrace, WeightScheme};
pub use trainer::{run, Federation, FedClient, TrainConfig, TrainResult};
pub use experiment::{run_bound_exploration, run_experiment, verify, BoundsConfig, ExperimentConfig, Summary};
pub use adversarial::{run_adversarial_check, AdversarialReport};
