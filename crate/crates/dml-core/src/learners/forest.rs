//! Random forest of CART regression trees.
//!
//! Tree `i` draws its bootstrap sample (size n, with replacement) and all
//! of its per-node feature subsets from the sub-stream
//! `derive_seed(effective_seed, [TREE, i])`, so trees are independent yet
//! reproducible under any fitting order.

use super::tree::{grow, RegressionTree, TreeParams};
use super::{tree_stream, Matrix};

pub(super) fn fit_forest(
    x: &Matrix,
    y: &[f64],
    n_estimators: usize,
    n_candidates: usize,
    params: &TreeParams,
    effective_seed: u64,
) -> Vec<RegressionTree> {
    let n = x.n_rows();
    (0..n_estimators)
        .map(|i| {
            let mut rng = tree_stream(effective_seed, i);
            let rows: Vec<usize> = (0..n).map(|_| rng.next_below(n as u64) as usize).collect();
            grow(x, y, &rows, params, n_candidates, Some(&mut rng))
        })
        .collect()
}

pub(super) fn predict_forest(trees: &[RegressionTree], x: &Matrix) -> Vec<f64> {
    (0..x.n_rows())
        .map(|i| {
            let row = x.row(i);
            let first = trees[0].predict_row(row);
            let mut sum = first;
            let mut all_equal = true;
            for t in &trees[1..] {
                let p = t.predict_row(row);
                all_equal &= p == first;
                sum += p;
            }
            // Unanimous trees return the common value unchanged; the mean
            // of k identical f64 values is otherwise not exact.
            if all_equal {
                first
            } else {
                sum / trees.len() as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{fit, parse_learner_spec, predict, Matrix, ModelState};
    use crate::rng::DetRng;

    fn random_data(n: usize, q: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = DetRng::from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..q).map(|_| rng.next_standard_normal()).collect())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| r[0] * 2.0 + rng.next_standard_normal() * 0.2)
            .collect();
        (Matrix::from_rows(&rows), y)
    }

    #[test]
    fn constant_target_is_reproduced_exactly() {
        let (x, _) = random_data(12, 2, 3);
        let y = vec![0.1; 12];
        let spec = parse_learner_spec("random_forest(n_estimators=7)").unwrap();
        let model = fit(&spec, &x, &y, 99).unwrap();
        for p in predict(&model, &x).unwrap() {
            assert_eq!(p, 0.1);
        }
    }

    #[test]
    fn singleton_forest_equals_its_tree() {
        let (x, y) = random_data(30, 3, 4);
        let spec = parse_learner_spec("random_forest(n_estimators=1)").unwrap();
        let model = fit(&spec, &x, &y, 5).unwrap();
        let ModelState::Forest(trees) = model.state() else { panic!() };
        assert_eq!(trees.len(), 1);
        let preds = predict(&model, &x).unwrap();
        for i in 0..x.n_rows() {
            assert_eq!(preds[i], trees[0].predict_row(x.row(i)));
        }
    }

    #[test]
    fn same_seed_same_forest() {
        let (x, y) = random_data(40, 3, 6);
        let spec = parse_learner_spec("random_forest(n_estimators=10,max_features=sqrt)").unwrap();
        let a = fit(&spec, &x, &y, 17).unwrap();
        let b = fit(&spec, &x, &y, 17).unwrap();
        let c = fit(&spec, &x, &y, 18).unwrap();
        let pa = predict(&a, &x).unwrap();
        let pb = predict(&b, &x).unwrap();
        let pc = predict(&c, &x).unwrap();
        assert_eq!(pa, pb);
        assert_ne!(pa, pc);
    }

    #[test]
    fn seed_salt_shifts_the_stream() {
        let (x, y) = random_data(40, 3, 6);
        let plain = parse_learner_spec("random_forest(n_estimators=5)").unwrap();
        let salted = parse_learner_spec("random_forest(n_estimators=5,seed_salt=1)").unwrap();
        let pa = predict(&fit(&plain, &x, &y, 17).unwrap(), &x).unwrap();
        let pb = predict(&fit(&salted, &x, &y, 17).unwrap(), &x).unwrap();
        assert_ne!(pa, pb);
        // salt XOR seed: the salted fit at a compensating seed matches.
        let pc = predict(&fit(&salted, &x, &y, 17 ^ 1).unwrap(), &x).unwrap();
        assert_eq!(pa, pc);
    }

    #[test]
    fn forest_training_mse_at_most_worst_tree() {
        let (x, y) = random_data(60, 3, 8);
        let spec = parse_learner_spec("random_forest(n_estimators=12,max_depth=3)").unwrap();
        let model = fit(&spec, &x, &y, 2).unwrap();
        let ModelState::Forest(trees) = model.state() else { panic!() };
        let mse = |preds: &[f64]| -> f64 {
            preds
                .iter()
                .zip(&y)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / y.len() as f64
        };
        let forest_mse = mse(&predict(&model, &x).unwrap());
        let worst_tree_mse = trees
            .iter()
            .map(|t| mse(&(0..x.n_rows()).map(|i| t.predict_row(x.row(i))).collect::<Vec<_>>()))
            .fold(f64::MIN, f64::max);
        assert!(
            forest_mse <= worst_tree_mse + 1e-12,
            "{forest_mse} > {worst_tree_mse}"
        );
    }
}
