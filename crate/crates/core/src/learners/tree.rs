use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasetgen::WindowedDataset;
use crate::numfmt::f17_vec;
use crate::rng::seeded;

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Fraction of features offered at each split; 1.0 offers all.
    pub feature_frac: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
            feature_frac: 1.0,
        }
    }
}

/// CART regression tree stored as flat node arrays. A node with
/// `feature == u32::MAX` is a leaf; otherwise `x[feature] <= threshold`
/// goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<u32>,
    #[serde(with = "f17_vec")]
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    #[serde(with = "f17_vec")]
    pub value: Vec<f64>,
}

pub fn fit_tree(train: &WindowedDataset, params: &TreeParams, seed: u64) -> Tree {
    let idx: Vec<usize> = (0..train.len()).collect();
    build_tree(&train.x, train.width(), &train.y, idx, params, &mut seeded(seed))
}

struct Split {
    feature: usize,
    threshold: f64,
    pos: usize,
    sse: f64,
}

pub(crate) fn build_tree<R: Rng>(
    x: &[f64],
    width: usize,
    y: &[f64],
    idx: Vec<usize>,
    params: &TreeParams,
    rng: &mut R,
) -> Tree {
    let mut tree = Tree {
        feature: Vec::new(),
        threshold: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        value: Vec::new(),
    };
    let min_leaf = params.min_samples_leaf.max(1);
    let n_try = ((params.feature_frac * width as f64).ceil() as usize).clamp(1, width.max(1));
    // (node id, depth, sample indices)
    let mut stack = vec![(tree.push_leaf(0.0), 0usize, idx)];
    while let Some((node, depth, idx)) = stack.pop() {
        let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        tree.value[node] = mean;
        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        let pure = idx.iter().all(|&i| y[i] == y[idx[0]]);
        if !depth_ok || pure || idx.len() < 2 * min_leaf {
            continue;
        }
        let features: Vec<usize> = if n_try >= width {
            (0..width).collect()
        } else {
            let mut f = sample(rng, width, n_try).into_vec();
            f.sort_unstable();
            f
        };
        let Some(split) = best_split(x, width, y, &idx, &features, min_leaf) else {
            continue;
        };
        let mut sorted = idx;
        sort_by_feature(x, width, &mut sorted, split.feature);
        let right_idx = sorted.split_off(split.pos);
        let l = tree.push_leaf(0.0);
        let r = tree.push_leaf(0.0);
        tree.feature[node] = split.feature as u32;
        tree.threshold[node] = split.threshold;
        tree.left[node] = l as u32;
        tree.right[node] = r as u32;
        stack.push((r, depth + 1, right_idx));
        stack.push((l, depth + 1, sorted));
    }
    tree
}

fn sort_by_feature(x: &[f64], width: usize, idx: &mut [usize], f: usize) {
    idx.sort_unstable_by(|&a, &b| x[a * width + f].total_cmp(&x[b * width + f]).then(a.cmp(&b)));
}

/// Lowest weighted-variance split over `features`; the first candidate wins
/// ties (features in order, then thresholds ascending).
fn best_split(
    x: &[f64],
    width: usize,
    y: &[f64],
    idx: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<Split> {
    let n = idx.len();
    let mut best: Option<Split> = None;
    let mut order = idx.to_vec();
    for &f in features {
        sort_by_feature(x, width, &mut order, f);
        let total: f64 = order.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
        let (mut s, mut sq) = (0.0, 0.0);
        for p in 1..n {
            let yi = y[order[p - 1]];
            s += yi;
            sq += yi * yi;
            if p < min_leaf || n - p < min_leaf {
                continue;
            }
            let lo = x[order[p - 1] * width + f];
            let hi = x[order[p] * width + f];
            if lo >= hi {
                continue;
            }
            let (nl, nr) = (p as f64, (n - p) as f64);
            let sse = (sq - s * s / nl) + ((total_sq - sq) - (total - s) * (total - s) / nr);
            if best.as_ref().is_none_or(|b| sse < b.sse) {
                let mut threshold = 0.5 * (lo + hi);
                // adjacent doubles: the midpoint may round up onto `hi`
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Split { feature: f, threshold, pos: p, sse });
            }
        }
    }
    best
}

impl Tree {
    fn push_leaf(&mut self, value: f64) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, n: usize) -> usize {
            if t.feature[n] == LEAF {
                0
            } else {
                1 + go(t, t.left[n] as usize).max(go(t, t.right[n] as usize))
            }
        }
        go(self, 0)
    }

    pub fn predict(&self, q: &[f64]) -> f64 {
        let mut n = 0;
        loop {
            let f = self.feature[n];
            if f == LEAF {
                return self.value[n];
            }
            n = if q[f as usize] <= self.threshold[n] {
                self.left[n]
            } else {
                self.right[n]
            } as usize;
        }
    }
}
