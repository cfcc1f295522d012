use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{build_tree, Tree, TreeParams};
use super::Hyperparams;
use crate::datasetgen::WindowedDataset;
use crate::rng::seeded;
use crate::{Error, Result};

/// Bagged CART ensemble; the prediction is the mean over trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

/// Tree `t` draws its bootstrap sample and feature subsets from a stream
/// seeded with `seed + t`, so the result is independent of thread count.
pub fn fit_forest(train: &WindowedDataset, hp: &Hyperparams, seed: u64) -> Result<Forest> {
    if hp.n_trees == 0 {
        return Err(Error::InvalidArgument("n_trees must be positive".into()));
    }
    if !(hp.feature_frac > 0.0 && hp.feature_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("feature_frac {} outside (0, 1]", hp.feature_frac)));
    }
    let params = TreeParams {
        max_depth: hp.max_depth,
        min_samples_leaf: hp.min_samples_leaf,
        feature_frac: hp.feature_frac,
    };
    let n = train.len();
    let width = train.width();
    let trees = (0..hp.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded(seed.wrapping_add(t as u64));
            let idx: Vec<usize> = if hp.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            build_tree(&train.x, width, &train.y, idx, &params, &mut rng)
        })
        .collect();
    Ok(Forest { trees })
}

impl Forest {
    pub fn predict(&self, q: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(q)).sum::<f64>() / self.trees.len() as f64
    }
}
