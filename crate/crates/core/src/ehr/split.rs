use rand::seq::SliceRandom;

use super::Cohort;
use crate::error::{Error, Result};
use crate::numerics::sub_rng;

/// Patient indices of one random train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    pub fn cohorts(&self, cohort: &Cohort) -> (Cohort, Cohort, Cohort) {
        (
            cohort.subset(&self.train),
            cohort.subset(&self.validation),
            cohort.subset(&self.test),
        )
    }
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// `n_folds` independent shuffles of the cohort, each cut into
/// train/validation/test by `ratios`. Not rotation cross-validation.
pub fn split_folds(
    cohort: &Cohort,
    seed: u64,
    n_folds: usize,
    ratios: (f64, f64, f64),
) -> Result<Vec<FoldSplit>> {
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9
        || r_train <= 0.0
        || r_val < 0.0
        || r_test < 0.0
    {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    if n_folds == 0 {
        return Err(Error::Config("n_folds must be at least 1".into()));
    }
    let n = cohort.len();
    if n < 10 {
        return Err(Error::Config(format!(
            "cohort of {n} patients is too small to split (need at least 10)"
        )));
    }
    let n_train = (r_train * n as f64).round() as usize;
    let n_val = ((r_val * n as f64).round() as usize).min(n - n_train);
    Ok((0..n_folds)
        .map(|fold| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut sub_rng(seed, 0x5_0000 + fold as u64));
            let test = order.split_off(n_train + n_val);
            let validation = order.split_off(n_train);
            FoldSplit {
                train: order,
                validation,
                test,
            }
        })
        .collect())
}
