//! Cross-validation splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    /// Training and validation ids together (everything but the test set).
    pub fn development(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).cloned().collect()
    }

    /// True when the test ids are disjoint from the train and val ids.
    pub fn is_leak_free(&self) -> bool {
        !self
            .test
            .iter()
            .any(|t| self.train.contains(t) || self.val.contains(t))
            && !self.val.iter().any(|v| self.train.contains(v))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

/// Deterministic shuffled `k`-fold partition of `ids`; within each fold the
/// non-test ids are split 80/20 into train and validation.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(invalid!("need at least 2 folds, got {k}"));
    }
    if ids.len() < k {
        return Err(invalid!(
            "{k} folds requested for only {} samples",
            ids.len()
        ));
    }
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = order.len();
    let bounds: Vec<usize> = (0..=k).map(|i| i * n / k).collect();
    let folds = (0..k)
        .map(|f| {
            let test = order[bounds[f]..bounds[f + 1]].to_vec();
            let mut rest: Vec<String> = order[..bounds[f]]
                .iter()
                .chain(&order[bounds[f + 1]..])
                .cloned()
                .collect();
            rest.shuffle(&mut rng);
            let mut n_val = (rest.len() as f64 * 0.2).round() as usize;
            if n_val == 0 && rest.len() >= 2 {
                n_val = 1;
            }
            let val = rest.split_off(rest.len() - n_val);
            Fold {
                train: rest,
                val,
                test,
            }
        })
        .collect();
    Ok(FoldSplit { folds })
}
