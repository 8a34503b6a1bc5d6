//! Ridge regression with an unpenalized intercept.
//!
//! Columns and target are centered, the penalized normal equations
//! `(X'X + lambda I) beta = X'y` are solved on the centered data, and the
//! intercept is recovered from the means. With `lambda = 0` a
//! rank-deficient design is reported as [`LearnerError::SingularSystem`]
//! rather than silently resolved by a pseudo-inverse.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{LearnerError, Matrix};

pub(super) fn fit_ridge(x: &Matrix, y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64), LearnerError> {
    let n = x.n_rows();
    let q = x.n_cols();

    let mut col_means = vec![0.0; q];
    for i in 0..n {
        for (j, m) in col_means.iter_mut().enumerate() {
            *m += x.get(i, j);
        }
    }
    for m in &mut col_means {
        *m /= n as f64;
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;

    // Gram and right-hand side on centered data.
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    for i in 0..n {
        let row = x.row(i);
        let yc = y[i] - y_mean;
        for a in 0..q {
            let xa = row[a] - col_means[a];
            rhs[a] += xa * yc;
            for b in a..q {
                gram[(a, b)] += xa * (row[b] - col_means[b]);
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
        gram[(a, a)] += lambda;
    }

    let beta = Cholesky::new(gram.clone())
        .map(|chol| chol.solve(&rhs))
        .ok_or(LearnerError::SingularSystem)?;
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::SingularSystem);
    }
    // Reject solves whose normal-equation residual is far off scale; a
    // Cholesky that only just went through on a near-singular gram matrix
    // shows up here.
    let residual = (&gram * &beta) - &rhs;
    let scale = rhs.amax().max(1.0);
    if residual.amax() > 1e-6 * scale {
        return Err(LearnerError::SingularSystem);
    }

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean
        - coefficients
            .iter()
            .zip(&col_means)
            .map(|(b, m)| b * m)
            .sum::<f64>();
    Ok((coefficients, intercept))
}
