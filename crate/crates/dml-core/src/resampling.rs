//! Repeated K-fold partitions of observation indices.
//!
//! Each repetition shuffles `0..N` with Fisher-Yates on its own derived
//! sub-stream and chunks the permutation into K contiguous blocks. When N
//! is not divisible by K, the first `N mod K` folds receive one extra
//! index, so fold sizes never differ by more than 1.

use thiserror::Error;

use crate::rng::{derive_seed, domain, DetRng};

#[derive(Debug, Error)]
pub enum ResamplingError {
    #[error("cannot draw {n_folds} folds from {n_obs} observations")]
    TooManyFolds { n_folds: usize, n_obs: usize },
    #[error("n_folds must be >= 2, got {0}")]
    TooFewFolds(usize),
    #[error("n_rep must be >= 1")]
    NoRepetitions,
}

/// M independent K-fold partitions of `0..n_obs`, a pure function of
/// `(n_obs, n_folds, n_rep, seed)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    n_obs: usize,
    n_folds: usize,
    n_rep: usize,
    seed: u64,
    folds: Vec<Vec<Vec<usize>>>,
}

impl FoldPlan {
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn n_rep(&self) -> usize {
        self.n_rep
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Test indices of fold `k` in repetition `m`, sorted ascending.
    pub fn test_indices(&self, rep: usize, fold: usize) -> &[usize] {
        &self.folds[rep][fold]
    }

    /// Complement of fold `k` in repetition `m`, sorted ascending.
    pub fn train_indices(&self, rep: usize, fold: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_obs - self.folds[rep][fold].len());
        for (i, f) in self.folds[rep].iter().enumerate() {
            if i != fold {
                out.extend_from_slice(f);
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn draw_folds(
    n_obs: usize,
    n_folds: usize,
    n_rep: usize,
    seed: u64,
) -> Result<FoldPlan, ResamplingError> {
    if n_folds < 2 {
        return Err(ResamplingError::TooFewFolds(n_folds));
    }
    if n_folds > n_obs {
        return Err(ResamplingError::TooManyFolds { n_folds, n_obs });
    }
    if n_rep == 0 {
        return Err(ResamplingError::NoRepetitions);
    }

    let base = n_obs / n_folds;
    let remainder = n_obs % n_folds;
    let mut folds = Vec::with_capacity(n_rep);
    for m in 0..n_rep {
        let mut perm: Vec<usize> = (0..n_obs).collect();
        let mut rng = DetRng::from_seed(derive_seed(seed, &[domain::FOLDS, m as u64]));
        rng.shuffle(&mut perm);
        let mut rep = Vec::with_capacity(n_folds);
        let mut offset = 0;
        for k in 0..n_folds {
            let size = base + usize::from(k < remainder);
            let mut fold: Vec<usize> = perm[offset..offset + size].to_vec();
            fold.sort_unstable();
            rep.push(fold);
            offset += size;
        }
        folds.push(rep);
    }
    Ok(FoldPlan { n_obs, n_folds, n_rep, seed, folds })
}
