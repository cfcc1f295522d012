use serde::{Deserialize, Serialize};

use crate::datasetgen::WindowedDataset;
use crate::numfmt::f17_vec;
use crate::{Error, Result};

/// Brute-force k-nearest-neighbour regressor (Euclidean, uniform weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub k: usize,
    pub width: usize,
    #[serde(with = "f17_vec")]
    pub x: Vec<f64>,
    #[serde(with = "f17_vec")]
    pub y: Vec<f64>,
}

pub fn fit_knn(train: &WindowedDataset, k: usize) -> Result<Knn> {
    if k == 0 || k > train.len() {
        return Err(Error::KTooLarge { k, n: train.len() });
    }
    Ok(Knn {
        k,
        width: train.width(),
        x: train.x.clone(),
        y: train.y.clone(),
    })
}

impl Knn {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Mean target of the `k` closest training windows. Equal distances are
    /// broken by the lower training index.
    pub fn predict(&self, q: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .chunks_exact(self.width)
            .enumerate()
            .map(|(i, row)| {
                let s = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (s, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
            d.truncate(self.k);
        }
        d.sort_unstable_by(cmp);
        d.iter().map(|&(_, i)| self.y[i]).sum::<f64>() / self.k as f64
    }
}
