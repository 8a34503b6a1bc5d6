//! Score assembly, per-repetition solves and aggregation.
//!
//! For the partially linear model the orthogonal score is linear in the
//! parameter, `psi = theta * psi_a + psi_b`, with
//!
//! ```text
//! psi_a_i = -(d_i - m_hat_i)^2
//! psi_b_i = (y_i - g_hat_i) * (d_i - m_hat_i)
//! ```
//!
//! so each repetition's estimate is the closed form
//! `theta = -sum(psi_b) / sum(psi_a)`. Estimates are aggregated across
//! repetitions by the median (even counts: mean of the two middle order
//! statistics) and the aggregated variance is
//! `median_m(var_m + (theta_m - theta)^2)`, the standard repeated
//! cross-fitting adjustment. Per-repetition variances use the plug-in
//! sandwich form `var_m = mean(psi^2) / (mean(psi_a)^2 * N)`.

use std::collections::HashMap;
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataset::{store_dataset, DatasetError, DmlDataset};
use crate::learners::LearnerSpec;
use crate::resampling::FoldPlan;
use crate::tasking::{
    build_batch, run_batch, ExecutionBackend, Nuisance, ScalingMode, TaskError,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("prediction vectors must have length {expected}, got g={got_g}, m={got_m}")]
    LengthMismatch { expected: usize, got_g: usize, got_m: usize },
    #[error("degenerate score: |sum(psi_a)| = {sum_abs} is below tolerance (no treatment residual variation)")]
    DegenerateScore { sum_abs: f64 },
    #[error("fold plan covers {plan_n} observations but the dataset has {ds_n}")]
    PlanMismatch { plan_n: usize, ds_n: usize },
    #[error("confidence level must be in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("variances must be non-negative and finite")]
    BadVariance,
    #[error("no repetitions to aggregate")]
    Empty,
    #[error("repetition {rep}: observation {index} predicted {count} times for nuisance {nuisance}")]
    PredictionCoverage { rep: usize, index: usize, count: usize, nuisance: &'static str },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// What a nuisance-fitting task regresses: g targets the outcome, m the
/// treatment, both on the controls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NuisanceTarget {
    pub nuisance: Nuisance,
    pub target_col: String,
    pub feature_cols: Vec<String>,
}

impl NuisanceTarget {
    pub fn outcome_regression(ds: &DmlDataset) -> Self {
        Self {
            nuisance: Nuisance::G,
            target_col: ds.roles().y_col.clone(),
            feature_cols: ds.roles().x_cols.clone(),
        }
    }

    pub fn treatment_regression(ds: &DmlDataset) -> Self {
        Self {
            nuisance: Nuisance::M,
            target_col: ds.roles().d_col.clone(),
            feature_cols: ds.roles().x_cols.clone(),
        }
    }
}

/// Score components for one repetition, aligned with observation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArrays {
    pub psi_a: Vec<f64>,
    pub psi_b: Vec<f64>,
    pub rep_index: usize,
}

/// Per-invocation statistics of one estimation run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub n_invocations: usize,
    pub n_fits: usize,
    pub wall_ms: u64,
    pub total_task_ms: u64,
    /// Per repetition: (sum of psi_a, sum of psi_b).
    pub score_sums: Vec<(f64, f64)>,
    /// Per repetition: |mean(theta_m * psi_a + psi_b)| after the solve.
    pub score_residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlFit {
    pub theta_per_rep: Vec<f64>,
    pub var_per_rep: Vec<f64>,
    pub theta: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub diagnostics: FitDiagnostics,
}

/// Flat inference record derived from a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlSummary {
    pub theta: f64,
    pub se: f64,
    pub t_stat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
}

impl DmlSummary {
    /// Key=value lines, machine-readable before anything human-facing.
    pub fn to_kv_string(&self) -> String {
        format!(
            "theta={}\nse={}\nt_stat={}\nci_lower={}\nci_upper={}\nlevel={}\n",
            self.theta, self.se, self.t_stat, self.ci_lower, self.ci_upper, self.level
        )
    }
}

pub fn compute_scores(
    ds: &DmlDataset,
    g_hat: &[f64],
    m_hat: &[f64],
    rep_index: usize,
) -> Result<ScoreArrays, EstimatorError> {
    let n = ds.n_obs();
    if g_hat.len() != n || m_hat.len() != n {
        return Err(EstimatorError::LengthMismatch {
            expected: n,
            got_g: g_hat.len(),
            got_m: m_hat.len(),
        });
    }
    let y = ds.column(&ds.roles().y_col)?;
    let d = ds.column(&ds.roles().d_col)?;
    let mut psi_a = Vec::with_capacity(n);
    let mut psi_b = Vec::with_capacity(n);
    for i in 0..n {
        let v = d[i] - m_hat[i];
        let u = y[i] - g_hat[i];
        psi_a.push(-(v * v));
        psi_b.push(u * v);
    }
    Ok(ScoreArrays { psi_a, psi_b, rep_index })
}

/// Tolerance factor for declaring `sum(psi_a)` degenerate.
const DEGENERATE_SCORE_TOL: f64 = 1e-12;

/// Closed-form solve: the root of `mean(theta * psi_a + psi_b) = 0`.
pub fn solve_theta(scores: &ScoreArrays) -> Result<f64, EstimatorError> {
    let sum_a: f64 = scores.psi_a.iter().sum();
    let sum_b: f64 = scores.psi_b.iter().sum();
    let n = scores.psi_a.len() as f64;
    if sum_a.abs() < DEGENERATE_SCORE_TOL * n {
        return Err(EstimatorError::DegenerateScore { sum_abs: sum_a.abs() });
    }
    Ok(-sum_b / sum_a)
}

/// Plug-in sandwich variance of one repetition's estimate.
pub fn rep_variance(scores: &ScoreArrays, theta: f64) -> f64 {
    let n = scores.psi_a.len() as f64;
    let j = scores.psi_a.iter().sum::<f64>() / n;
    let mean_sq = scores
        .psi_a
        .iter()
        .zip(&scores.psi_b)
        .map(|(&a, &b)| {
            let psi = theta * a + b;
            psi * psi
        })
        .sum::<f64>()
        / n;
    mean_sq / (j * j) / n
}

/// Median with the documented even-count rule (mean of the middle two).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Aggregates per-repetition estimates: median point estimate, the
/// repeated cross-fitting variance adjustment, and a two-sided normal CI.
pub fn aggregate(
    theta_per_rep: &[f64],
    var_per_rep: &[f64],
    level: f64,
) -> Result<(f64, f64, (f64, f64)), EstimatorError> {
    if theta_per_rep.is_empty() || theta_per_rep.len() != var_per_rep.len() {
        return Err(EstimatorError::Empty);
    }
    if !(0.0 < level && level < 1.0) {
        return Err(EstimatorError::BadLevel(level));
    }
    if var_per_rep.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(EstimatorError::BadVariance);
    }
    let theta = median(theta_per_rep);
    let adjusted: Vec<f64> = var_per_rep
        .iter()
        .zip(theta_per_rep)
        .map(|(&v, &t)| v + (t - theta) * (t - theta))
        .collect();
    let var = median(&adjusted);
    let se = var.sqrt();
    let z = normal_quantile(0.5 + level / 2.0);
    Ok((theta, se, (theta - z * se, theta + z * se)))
}

/// Inference summary from a completed fit.
pub fn infer(fit: &DmlFit) -> DmlSummary {
    DmlSummary {
        theta: fit.theta,
        se: fit.se,
        t_stat: if fit.se > 0.0 { fit.theta / fit.se } else { f64::INFINITY },
        ci_lower: fit.ci_lower,
        ci_upper: fit.ci_upper,
        level: fit.level,
    }
}

/// Full estimation run: stores the dataset in the backend's object store,
/// builds the task batch, dispatches it, reassembles cross-fitted
/// predictions by observation index, and solves and aggregates the score.
///
/// The task master seed is the fold plan's seed, so one seed fixes both
/// the partitions and every learner fit. Total fits executed equal
/// `n_rep * n_folds * 2`.
pub fn fit_dml_plr(
    ds: &DmlDataset,
    spec_g: &LearnerSpec,
    spec_m: &LearnerSpec,
    plan: &FoldPlan,
    backend: &dyn ExecutionBackend,
    scaling: ScalingMode,
    level: f64,
) -> Result<DmlFit, EstimatorError> {
    if plan.n_obs() != ds.n_obs() {
        return Err(EstimatorError::PlanMismatch { plan_n: plan.n_obs(), ds_n: ds.n_obs() });
    }
    if !(0.0 < level && level < 1.0) {
        return Err(EstimatorError::BadLevel(level));
    }
    let started = Instant::now();
    let n = ds.n_obs();
    let n_rep = plan.n_rep();

    let ds_ref = store_dataset(ds, backend.object_store())?;
    let g_target = NuisanceTarget::outcome_regression(ds);
    let m_target = NuisanceTarget::treatment_regression(ds);
    let payloads = build_batch(
        &ds_ref,
        plan,
        &g_target,
        &m_target,
        spec_g,
        spec_m,
        scaling,
        plan.seed(),
    )?;
    let n_fits = payloads.iter().map(|p| p.splits.len()).sum();
    let results = run_batch(backend, &payloads)?;

    // Reassemble predictions by absolute observation index; each index
    // must be predicted exactly once per repetition per nuisance.
    let by_id: HashMap<&str, (usize, Nuisance)> = payloads
        .iter()
        .map(|p| (p.task_id.as_str(), (p.rep_index, p.nuisance)))
        .collect();
    let mut g_hat = vec![vec![0.0; n]; n_rep];
    let mut m_hat = vec![vec![0.0; n]; n_rep];
    let mut counts_g = vec![vec![0u8; n]; n_rep];
    let mut counts_m = vec![vec![0u8; n]; n_rep];
    let mut total_task_ms = 0;
    for r in &results {
        total_task_ms += r.duration_ms;
        let &(rep, nuisance) = by_id
            .get(r.task_id.as_str())
            .ok_or_else(|| TaskError::Protocol(format!("unknown result id {}", r.task_id)))?;
        let (hat, counts) = match nuisance {
            Nuisance::G => (&mut g_hat[rep], &mut counts_g[rep]),
            Nuisance::M => (&mut m_hat[rep], &mut counts_m[rep]),
        };
        for &(idx, value) in &r.predictions {
            hat[idx] = value;
            counts[idx] += 1;
        }
    }
    for rep in 0..n_rep {
        for (nuisance, counts) in [("g", &counts_g[rep]), ("m", &counts_m[rep])] {
            if let Some(index) = counts.iter().position(|&c| c != 1) {
                return Err(EstimatorError::PredictionCoverage {
                    rep,
                    index,
                    count: counts[index] as usize,
                    nuisance,
                });
            }
        }
    }

    let mut theta_per_rep = Vec::with_capacity(n_rep);
    let mut var_per_rep = Vec::with_capacity(n_rep);
    let mut score_sums = Vec::with_capacity(n_rep);
    let mut score_residuals = Vec::with_capacity(n_rep);
    for rep in 0..n_rep {
        let scores = compute_scores(ds, &g_hat[rep], &m_hat[rep], rep)?;
        let theta = solve_theta(&scores)?;
        let residual = scores
            .psi_a
            .iter()
            .zip(&scores.psi_b)
            .map(|(&a, &b)| theta * a + b)
            .sum::<f64>()
            / n as f64;
        theta_per_rep.push(theta);
        var_per_rep.push(rep_variance(&scores, theta));
        score_sums.push((scores.psi_a.iter().sum(), scores.psi_b.iter().sum()));
        score_residuals.push(residual.abs());
    }

    let (theta, se, (ci_lower, ci_upper)) = aggregate(&theta_per_rep, &var_per_rep, level)?;
    Ok(DmlFit {
        theta_per_rep,
        var_per_rep,
        theta,
        se,
        ci_lower,
        ci_upper,
        level,
        diagnostics: FitDiagnostics {
            n_invocations: results.len(),
            n_fits,
            wall_ms: started.elapsed().as_millis() as u64,
            total_task_ms,
            score_sums,
            score_residuals,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DmlDataset, ObjectStore, Roles};
    use crate::learners::parse_learner_spec;
    use crate::resampling::draw_folds;
    use crate::tasking::SerialBackend;
    use tempfile::TempDir;

    fn dataset_from(y: &[f64], d: &[f64]) -> DmlDataset {
        let x: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
        DmlDataset::new(
            vec![
                ("y".into(), y.to_vec()),
                ("d".into(), d.to_vec()),
                ("x1".into(), x),
            ],
            Roles { y_col: "y".into(), d_col: "d".into(), x_cols: vec!["x1".into()] },
        )
        .unwrap()
    }

    #[test]
    fn scores_vanish_when_treatment_residual_is_zero() {
        let ds = dataset_from(&[1.0, 2.0, 3.0], &[0.5, 0.25, 0.75]);
        let d = ds.column("d").unwrap().to_vec();
        let scores = compute_scores(&ds, &[0.0, 0.0, 0.0], &d, 0).unwrap();
        assert_eq!(scores.psi_a, vec![0.0, 0.0, 0.0]);
        assert_eq!(scores.psi_b, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn scores_match_direct_arithmetic() {
        // residuals v = d - m_hat = [1, -1, 2], u = y - g_hat = [2, 1, 0]
        let ds = dataset_from(&[2.0, 1.0, 0.0], &[1.0, -1.0, 2.0]);
        let scores =
            compute_scores(&ds, &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(scores.psi_a, vec![-1.0, -1.0, -4.0]);
        assert_eq!(scores.psi_b, vec![2.0, -1.0, 0.0]);
        assert_eq!(solve_theta(&scores).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn unit_residuals_recover_theta() {
        let theta0 = 3.25;
        // v = 1 everywhere, u = theta0 * v.
        let ds = dataset_from(&[theta0, theta0, theta0], &[1.0, 1.0, 1.0]);
        let scores =
            compute_scores(&ds, &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(scores.psi_a, vec![-1.0, -1.0, -1.0]);
        assert_eq!(scores.psi_b, vec![theta0, theta0, theta0]);
        assert_eq!(solve_theta(&scores).unwrap(), theta0);
    }

    #[test]
    fn constant_scores_solve_directly() {
        let scores = ScoreArrays { psi_a: vec![-1.0; 4], psi_b: vec![0.5; 4], rep_index: 0 };
        assert_eq!(solve_theta(&scores).unwrap(), 0.5);
    }

    #[test]
    fn zero_psi_a_is_degenerate() {
        let scores = ScoreArrays { psi_a: vec![0.0; 4], psi_b: vec![0.5; 4], rep_index: 0 };
        assert!(matches!(
            solve_theta(&scores).unwrap_err(),
            EstimatorError::DegenerateScore { .. }
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let ds = dataset_from(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]);
        assert!(matches!(
            compute_scores(&ds, &[0.0; 2], &[0.0; 3], 0).unwrap_err(),
            EstimatorError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn aggregate_singleton_and_median_rules() {
        let (theta, se, _) = aggregate(&[1.5], &[0.04], 0.95).unwrap();
        assert_eq!(theta, 1.5);
        assert_eq!(se, 0.2);

        let (theta, _, _) = aggregate(&[1.0, 2.0, 100.0], &[0.0; 3], 0.95).unwrap();
        assert_eq!(theta, 2.0);

        let (theta, _, _) = aggregate(&[1.0, 3.0], &[0.0; 2], 0.95).unwrap();
        assert_eq!(theta, 2.0);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let thetas = [0.3, -1.0, 0.7, 0.5, 0.1];
        let vars = [0.01, 0.02, 0.03, 0.04, 0.05];
        let (t1, s1, ci1) = aggregate(&thetas, &vars, 0.9).unwrap();
        let perm_t = [0.7, 0.1, 0.3, -1.0, 0.5];
        let perm_v = [0.03, 0.05, 0.01, 0.02, 0.04];
        let (t2, s2, ci2) = aggregate(&perm_t, &perm_v, 0.9).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
        assert_eq!(ci1, ci2);
    }

    #[test]
    fn ci_halfwidth_matches_normal_quantile() {
        let (theta, se, (lo, hi)) = aggregate(&[0.0, 0.0, 0.0], &[1.0; 3], 0.95).unwrap();
        assert_eq!(theta, 0.0);
        assert_eq!(se, 1.0);
        assert!((hi - 1.959964).abs() < 1e-6, "upper {hi}");
        assert!((lo + 1.959964).abs() < 1e-6, "lower {lo}");
    }

    #[test]
    fn variance_formula_matches_independent_evaluation() {
        let scores = ScoreArrays {
            psi_a: vec![-1.0, -2.0, -0.5, -1.5],
            psi_b: vec![0.3, 1.1, -0.4, 0.9],
            rep_index: 0,
        };
        let theta = solve_theta(&scores).unwrap();
        let var = rep_variance(&scores, theta);

        // Written out term by term, independently of rep_variance.
        let n = 4.0;
        let j = (-1.0 - 2.0 - 0.5 - 1.5) / n;
        let mut mean_sq = 0.0;
        for (a, b) in [(-1.0, 0.3), (-2.0, 1.1), (-0.5, -0.4), (-1.5, 0.9)] {
            let psi: f64 = theta * a + b;
            mean_sq += psi * psi / n;
        }
        let expected = (1.0 / n) * (1.0 / (j * j)) * mean_sq;
        assert!((var - expected).abs() <= 1e-12);
    }

    #[test]
    fn perfect_fit_has_zero_variance() {
        // 0.75 sums exactly in f64, so the solve and the residuals are exact.
        let scores = ScoreArrays { psi_a: vec![-1.0; 3], psi_b: vec![0.75; 3], rep_index: 0 };
        let theta = solve_theta(&scores).unwrap();
        assert_eq!(theta, 0.75);
        assert_eq!(rep_variance(&scores, theta), 0.0);
    }

    #[test]
    fn end_to_end_fit_recovers_synthetic_theta() {
        let cfg = crate::dgp::PlrDgpConfig {
            n_obs: 400,
            dim_x: 3,
            theta0: 0.5,
            g_form: crate::dgp::FunctionalForm::Linear,
            m_form: crate::dgp::FunctionalForm::Linear,
            noise_sd_u: 1.0,
            noise_sd_v: 1.0,
            seed: 11,
        };
        let ds = crate::dgp::generate_plr(&cfg).unwrap();
        let plan = draw_folds(400, 2, 3, 5).unwrap();
        let dir = TempDir::new().unwrap();
        let backend = SerialBackend::new(ObjectStore::open(dir.path()).unwrap());
        let spec = parse_learner_spec("ridge(lambda=0.001)").unwrap();
        let fit = fit_dml_plr(
            &ds,
            &spec,
            &spec,
            &plan,
            &backend,
            ScalingMode::PerRep,
            0.95,
        )
        .unwrap();

        assert_eq!(fit.diagnostics.n_invocations, 6);
        assert_eq!(fit.diagnostics.n_fits, 12);
        assert_eq!(fit.theta, median(&fit.theta_per_rep));
        assert!((fit.theta - 0.5).abs() <= 4.0 * fit.se, "theta {} se {}", fit.theta, fit.se);
        for (m, residual) in fit.diagnostics.score_residuals.iter().enumerate() {
            assert!(*residual <= 1e-10, "rep {m} residual {residual}");
        }
        for (m, (sum_a, sum_b)) in fit.diagnostics.score_sums.iter().enumerate() {
            assert_eq!(fit.theta_per_rep[m], -sum_b / sum_a);
        }

        let summary = infer(&fit);
        assert_eq!(summary.theta, fit.theta);
        let kv = summary.to_kv_string();
        assert!(kv.starts_with(&format!("theta={}\n", fit.theta)));
    }

    #[test]
    fn plan_mismatch_rejected() {
        let ds = dataset_from(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]);
        let plan = draw_folds(10, 2, 1, 0).unwrap();
        let dir = TempDir::new().unwrap();
        let backend = SerialBackend::new(ObjectStore::open(dir.path()).unwrap());
        let spec = parse_learner_spec("ridge(lambda=1)").unwrap();
        assert!(matches!(
            fit_dml_plr(&ds, &spec, &spec, &plan, &backend, ScalingMode::PerRep, 0.95)
                .unwrap_err(),
            EstimatorError::PlanMismatch { plan_n: 10, ds_n: 3 }
        ));
    }
}
