//! Double machine learning for the partially linear regression model
//!
//! The estimation workload — one machine-learning fit per (sample split,
//! fold, nuisance function) — fans out as self-describing tasks to
//! pluggable execution backends. Backends include an in-process serial
//! runner, a local worker pool, and a deterministic simulator of a
//! serverless platform that models memory-proportional CPU scaling,
//! cold starts, runtime caps and per-millisecond GB-second billing.
//!
//! The statistical core estimates the causal parameter of
//!
//! ```text
//! Y = D theta + g(X) + U,    D = m(X) + V
//! ```
//!
//! by cross-fitting the nuisance regressions g and m, evaluating the
//! orthogonal score, solving for theta per sample split and aggregating
//! across splits by the median.

pub mod dataset;
pub mod dgp;
pub mod estimator;
pub mod faassim;
pub mod learners;
pub mod resampling;
pub mod rng;
pub mod tasking;

pub use dataset::{DatasetRef, DmlDataset, ObjectStore};
pub use estimator::{fit_dml_plr, DmlFit, DmlSummary};
pub use learners::LearnerSpec;
pub use resampling::FoldPlan;
pub use tasking::{ExecutionBackend, PoolBackend, ScalingMode, SerialBackend};
