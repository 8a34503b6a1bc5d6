//! The invocation contract and execution backends.
//!
//! A task carries everything a stateless worker needs: a dataset
//! reference, the target and feature column names, a learner spec string,
//! train/test index pairs and a seed. The worker fits on each train set
//! and returns predictions for the test indices; fitted models never
//! cross the boundary.
//!
//! Seeding is fold-level so both scaling modes execute identical fits:
//! the fit seed for fold k of repetition m is
//! `derive_seed(derive_seed(master, [TASK, m, nuisance]), [k])`. A
//! per-fold payload ships that value directly in `seed` (its single split
//! uses it as-is); a per-repetition payload ships the inner value and the
//! worker derives the per-split seed from the split position, which
//! equals the fold index because splits are ordered by fold.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{fetch_dataset, DatasetError, DatasetRef, DmlDataset, ObjectStore};
use crate::estimator::NuisanceTarget;
use crate::learners::{self, LearnerSpec, Matrix};
use crate::resampling::FoldPlan;
use crate::rng::{derive_seed, domain};

/// Wire-size ceiling for one encoded payload or result.
pub const MAX_WIRE_BYTES: usize = 6_000_000;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {task_id}: unknown dataset key '{key}'")]
    UnknownKey { task_id: String, key: String },
    #[error("task {task_id} failed: {message}")]
    Failed { task_id: String, message: String },
    #[error("task {task_id} exceeded the wall-time limit: {duration_ms} ms > {limit_ms} ms")]
    Timeout { task_id: String, duration_ms: u64, limit_ms: u64 },
    #[error("task {task_id}: encoded {kind} is {bytes} bytes, over the {limit}-byte cap")]
    PayloadTooLarge { task_id: String, kind: &'static str, bytes: usize, limit: usize },
    #[error("batch protocol violation: {0}")]
    Protocol(String),
}

/// Which nuisance function a task estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nuisance {
    #[serde(rename = "g")]
    G,
    #[serde(rename = "m")]
    M,
}

impl Nuisance {
    pub fn id(self) -> u64 {
        match self {
            Nuisance::G => 0,
            Nuisance::M => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Nuisance::G => "g",
            Nuisance::M => "m",
        }
    }
}

/// One train/test index pair; indices are zero-based observation indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPair {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task_id: String,
    pub dataset_ref: DatasetRef,
    pub target_col: String,
    pub feature_cols: Vec<String>,
    pub learner_spec: String,
    pub splits: Vec<SplitPair>,
    pub seed: u64,
    pub rep_index: usize,
    pub nuisance: Nuisance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub predictions: Vec<(usize, f64)>,
    pub duration_ms: u64,
    pub worker_meta: BTreeMap<String, String>,
}

/// One task per (repetition, nuisance) bundling K fits, or one task per
/// (repetition, fold, nuisance) with a single fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingMode {
    #[serde(rename = "per_rep")]
    PerRep,
    #[serde(rename = "per_fold")]
    PerFold,
}

impl std::fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScalingMode::PerRep => "per_rep",
            ScalingMode::PerFold => "per_fold",
        })
    }
}

impl std::str::FromStr for ScalingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_rep" => Ok(ScalingMode::PerRep),
            "per_fold" => Ok(ScalingMode::PerFold),
            other => Err(format!("unknown scaling '{other}' (per_rep|per_fold)")),
        }
    }
}

/// Backend limits; zero means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCaps {
    pub max_concurrency: usize,
    pub task_time_limit_ms: u64,
}

/// A task runner. `run_batch` returns exactly one result per payload (in
/// payload order) or the error of the first failing task.
pub trait ExecutionBackend {
    fn capabilities(&self) -> BackendCaps;
    fn object_store(&self) -> &ObjectStore;
    fn run_batch(&self, payloads: &[TaskPayload]) -> Result<Vec<TaskResult>, TaskError>;
}

/// Seed of the per-(repetition, nuisance) stream.
pub fn nuisance_stream_seed(master_seed: u64, rep: usize, nuisance: Nuisance) -> u64 {
    derive_seed(master_seed, &[domain::TASK, rep as u64, nuisance.id()])
}

/// Seed of the single fit for fold `k` of repetition `m`; identical under
/// both scaling modes.
pub fn fold_fit_seed(master_seed: u64, rep: usize, fold: usize, nuisance: Nuisance) -> u64 {
    derive_seed(nuisance_stream_seed(master_seed, rep, nuisance), &[fold as u64])
}

pub fn encode_payload(payload: &TaskPayload) -> Result<Vec<u8>, TaskError> {
    let bytes = serde_json::to_vec(payload)
        .map_err(|e| TaskError::Protocol(format!("payload encoding failed: {e}")))?;
    if bytes.len() > MAX_WIRE_BYTES {
        return Err(TaskError::PayloadTooLarge {
            task_id: payload.task_id.clone(),
            kind: "payload",
            bytes: bytes.len(),
            limit: MAX_WIRE_BYTES,
        });
    }
    Ok(bytes)
}

pub fn decode_payload(bytes: &[u8]) -> Result<TaskPayload, TaskError> {
    serde_json::from_slice(bytes)
        .map_err(|e| TaskError::Protocol(format!("payload decoding failed: {e}")))
}

pub fn encode_result(result: &TaskResult) -> Result<Vec<u8>, TaskError> {
    let bytes = serde_json::to_vec(result)
        .map_err(|e| TaskError::Protocol(format!("result encoding failed: {e}")))?;
    if bytes.len() > MAX_WIRE_BYTES {
        return Err(TaskError::PayloadTooLarge {
            task_id: result.task_id.clone(),
            kind: "result",
            bytes: bytes.len(),
            limit: MAX_WIRE_BYTES,
        });
    }
    Ok(bytes)
}

pub fn decode_result(bytes: &[u8]) -> Result<TaskResult, TaskError> {
    serde_json::from_slice(bytes)
        .map_err(|e| TaskError::Protocol(format!("result decoding failed: {e}")))
}

/// Builds the task batch for one estimation run. Every payload passes the
/// wire-size cap; task seeds depend only on (master_seed, repetition,
/// fold, nuisance), never on the scaling mode.
#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    ds_ref: &DatasetRef,
    plan: &FoldPlan,
    g_target: &NuisanceTarget,
    m_target: &NuisanceTarget,
    spec_g: &LearnerSpec,
    spec_m: &LearnerSpec,
    scaling: ScalingMode,
    master_seed: u64,
) -> Result<Vec<TaskPayload>, TaskError> {
    let mut payloads = Vec::new();
    for rep in 0..plan.n_rep() {
        for nuisance in [Nuisance::G, Nuisance::M] {
            let (target, spec) = match nuisance {
                Nuisance::G => (g_target, spec_g),
                Nuisance::M => (m_target, spec_m),
            };
            match scaling {
                ScalingMode::PerRep => {
                    let splits = (0..plan.n_folds())
                        .map(|k| SplitPair {
                            train_indices: plan.train_indices(rep, k),
                            test_indices: plan.test_indices(rep, k).to_vec(),
                        })
                        .collect();
                    payloads.push(TaskPayload {
                        task_id: format!("m{rep}-{}", nuisance.tag()),
                        dataset_ref: ds_ref.clone(),
                        target_col: target.target_col.clone(),
                        feature_cols: target.feature_cols.clone(),
                        learner_spec: spec.render(),
                        splits,
                        seed: nuisance_stream_seed(master_seed, rep, nuisance),
                        rep_index: rep,
                        nuisance,
                    });
                }
                ScalingMode::PerFold => {
                    for k in 0..plan.n_folds() {
                        payloads.push(TaskPayload {
                            task_id: format!("m{rep}-k{k}-{}", nuisance.tag()),
                            dataset_ref: ds_ref.clone(),
                            target_col: target.target_col.clone(),
                            feature_cols: target.feature_cols.clone(),
                            learner_spec: spec.render(),
                            splits: vec![SplitPair {
                                train_indices: plan.train_indices(rep, k),
                                test_indices: plan.test_indices(rep, k).to_vec(),
                            }],
                            seed: fold_fit_seed(master_seed, rep, k, nuisance),
                            rep_index: rep,
                            nuisance,
                        });
                    }
                }
            }
        }
    }
    for p in &payloads {
        encode_payload(p)?;
    }
    Ok(payloads)
}

/// The worker function: fetch the dataset, fit on each train set, predict
/// the test rows. Pure in (payload, stored dataset); `duration_ms` covers
/// the fit/predict loop, not the dataset fetch.
pub fn execute_task(payload: &TaskPayload, store: &ObjectStore) -> Result<TaskResult, TaskError> {
    let fail = |message: String| TaskError::Failed {
        task_id: payload.task_id.clone(),
        message,
    };

    let spec = learners::parse_learner_spec(&payload.learner_spec)
        .map_err(|e| fail(format!("bad learner spec: {e}")))?;
    let ds = fetch_dataset(&payload.dataset_ref, store).map_err(|e| match e {
        DatasetError::UnknownKey(key) => TaskError::UnknownKey {
            task_id: payload.task_id.clone(),
            key,
        },
        other => fail(format!("dataset fetch failed: {other}")),
    })?;
    validate_splits(payload, &ds).map_err(fail)?;

    let single_split = payload.splits.len() == 1;
    let started = Instant::now();
    let mut predictions = Vec::new();
    for (j, split) in payload.splits.iter().enumerate() {
        let seed = if single_split {
            payload.seed
        } else {
            derive_seed(payload.seed, &[j as u64])
        };
        let x_train = Matrix::from_rows(
            &ds.feature_rows(&payload.feature_cols, &split.train_indices)
                .map_err(|e| fail(e.to_string()))?,
        );
        let y_train = ds
            .target_values(&payload.target_col, &split.train_indices)
            .map_err(|e| fail(e.to_string()))?;
        let model =
            learners::fit(&spec, &x_train, &y_train, seed).map_err(|e| fail(e.to_string()))?;
        let x_test = Matrix::from_rows(
            &ds.feature_rows(&payload.feature_cols, &split.test_indices)
                .map_err(|e| fail(e.to_string()))?,
        );
        let preds = learners::predict(&model, &x_test).map_err(|e| fail(e.to_string()))?;
        predictions.extend(split.test_indices.iter().copied().zip(preds));
    }
    let duration_ms = started.elapsed().as_millis() as u64;

    let result = TaskResult {
        task_id: payload.task_id.clone(),
        predictions,
        duration_ms,
        worker_meta: BTreeMap::new(),
    };
    encode_result(&result)?;
    Ok(result)
}

fn validate_splits(payload: &TaskPayload, ds: &DmlDataset) -> Result<(), String> {
    let n = ds.n_obs();
    for split in &payload.splits {
        if split.test_indices.is_empty() {
            return Err("empty test set".into());
        }
        if split.train_indices.is_empty() {
            return Err("empty train set".into());
        }
        let train: HashSet<usize> = split.train_indices.iter().copied().collect();
        for &i in split.train_indices.iter().chain(&split.test_indices) {
            if i >= n {
                return Err(format!("index {i} out of range for {n} observations"));
            }
        }
        if split.test_indices.iter().any(|i| train.contains(i)) {
            return Err("train and test sets overlap".into());
        }
    }
    Ok(())
}

fn check_time_limit(result: TaskResult, limit_ms: u64) -> Result<TaskResult, TaskError> {
    if limit_ms > 0 && result.duration_ms > limit_ms {
        return Err(TaskError::Timeout {
            task_id: result.task_id,
            duration_ms: result.duration_ms,
            limit_ms,
        });
    }
    Ok(result)
}

/// Runs tasks one at a time on the calling thread.
pub struct SerialBackend {
    store: ObjectStore,
    time_limit_ms: u64,
}

impl SerialBackend {
    pub fn new(store: ObjectStore) -> Self {
        Self { store, time_limit_ms: 0 }
    }

    pub fn with_time_limit(store: ObjectStore, time_limit_ms: u64) -> Self {
        Self { store, time_limit_ms }
    }
}

impl ExecutionBackend for SerialBackend {
    fn capabilities(&self) -> BackendCaps {
        BackendCaps { max_concurrency: 1, task_time_limit_ms: self.time_limit_ms }
    }

    fn object_store(&self) -> &ObjectStore {
        &self.store
    }

    fn run_batch(&self, payloads: &[TaskPayload]) -> Result<Vec<TaskResult>, TaskError> {
        payloads
            .iter()
            .map(|p| execute_task(p, &self.store).and_then(|r| check_time_limit(r, self.time_limit_ms)))
            .collect()
    }
}

/// Runs tasks on a fixed number of local worker threads. Results are
/// reassembled by payload index, so any interleaving yields the same
/// output; on the first failure remaining tasks are not started.
pub struct PoolBackend {
    store: ObjectStore,
    workers: usize,
    time_limit_ms: u64,
}

impl PoolBackend {
    pub fn new(store: ObjectStore, workers: usize) -> Self {
        Self { store, workers: workers.max(1), time_limit_ms: 0 }
    }

    pub fn with_time_limit(store: ObjectStore, workers: usize, time_limit_ms: u64) -> Self {
        Self { store, workers: workers.max(1), time_limit_ms }
    }
}

impl ExecutionBackend for PoolBackend {
    fn capabilities(&self) -> BackendCaps {
        BackendCaps { max_concurrency: self.workers, task_time_limit_ms: self.time_limit_ms }
    }

    fn object_store(&self) -> &ObjectStore {
        &self.store
    }

    fn run_batch(&self, payloads: &[TaskPayload]) -> Result<Vec<TaskResult>, TaskError> {
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let slots: Mutex<Vec<Option<Result<TaskResult, TaskError>>>> =
            Mutex::new((0..payloads.len()).map(|_| None).collect());

        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(payloads.len()) {
                scope.spawn(|| loop {
                    if abort.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= payloads.len() {
                        break;
                    }
                    let outcome = execute_task(&payloads[i], &self.store)
                        .and_then(|r| check_time_limit(r, self.time_limit_ms));
                    if outcome.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    slots.lock().expect("slots lock")[i] = Some(outcome);
                });
            }
        });

        let slots = slots.into_inner().expect("slots lock");
        let mut results = Vec::with_capacity(slots.len());
        let mut first_error: Option<TaskError> = None;
        let mut unexecuted = false;
        for slot in slots {
            match slot {
                Some(Ok(r)) => results.push(r),
                // Scanning in payload order makes the reported failure the
                // earliest one by task index, not by completion time.
                Some(Err(e)) => {
                    first_error.get_or_insert(e);
                }
                None => unexecuted = true,
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        if unexecuted {
            return Err(TaskError::Protocol("a task was never executed".into()));
        }
        Ok(results)
    }
}

/// Runs a batch and enforces the completeness contract: exactly one
/// result per payload with matching task ids.
pub fn run_batch(
    backend: &dyn ExecutionBackend,
    payloads: &[TaskPayload],
) -> Result<Vec<TaskResult>, TaskError> {
    let results = backend.run_batch(payloads)?;
    if results.len() != payloads.len() {
        return Err(TaskError::Protocol(format!(
            "{} payloads but {} results",
            payloads.len(),
            results.len()
        )));
    }
    let expected: HashSet<&str> = payloads.iter().map(|p| p.task_id.as_str()).collect();
    let got: HashSet<&str> = results.iter().map(|r| r.task_id.as_str()).collect();
    if expected != got {
        return Err(TaskError::Protocol("result task ids do not match payloads".into()));
    }
    let mut by_id: HashMap<&str, &TaskPayload> =
        payloads.iter().map(|p| (p.task_id.as_str(), p)).collect();
    for r in &results {
        let p = by_id.remove(r.task_id.as_str()).ok_or_else(|| {
            TaskError::Protocol(format!("duplicate result for task {}", r.task_id))
        })?;
        let mut expected: Vec<usize> = p
            .splits
            .iter()
            .flat_map(|s| s.test_indices.iter().copied())
            .collect();
        expected.sort_unstable();
        let mut covered: Vec<usize> = r.predictions.iter().map(|&(i, _)| i).collect();
        covered.sort_unstable();
        if expected != covered {
            return Err(TaskError::Protocol(format!(
                "task {} predictions do not cover its test indices exactly",
                r.task_id
            )));
        }
    }
    Ok(results)
}
