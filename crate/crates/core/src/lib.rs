//! Contextual bandits with latent arm similarity: an adaptive
//! context-arm partitioning policy that learns which arms behave alike from
//! its own samples, plus the oracle and no-similarity baselines, metrics and
//! an experiment harness.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod env;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod partition;
pub mod policy;

pub use env::{Environment, RewardModel};
pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentConfig, Manifest};
pub use partition::{FlagMode, PartitionState, Phase};
pub use policy::{run, run_with, ApproxZooming, KMode, PolicyConfig, TrajectoryLog, TrialRecord, Variant};
