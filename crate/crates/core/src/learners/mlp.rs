use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Hyperparams, Optimizer, VALIDATION_FRAC};
use crate::datasetgen::WindowedDataset;
use crate::numfmt::f17_vec;
use crate::rng::rng_from;
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fully connected ReLU network with a single linear output.
///
/// All weights live in one flat vector. Layer `l` stores its
/// `sizes[l+1] x sizes[l]` weight matrix column-major, followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    #[serde(with = "f17_vec")]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MlpMeta {
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept; 0 if no epoch ran.
    pub best_epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(sizes: Vec<usize>, rng: &mut R) -> Mlp {
        let total = sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        let mut params = Vec::with_capacity(total);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp { sizes, params }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn offsets(&self, l: usize) -> (usize, usize) {
        let w_off: usize = self.sizes.windows(2).take(l).map(|w| w[1] * w[0] + w[1]).sum();
        (w_off, w_off + self.sizes[l + 1] * self.sizes[l])
    }

    fn weights(&self, params: &[f64], l: usize) -> DMatrix<f64> {
        let (w_off, _) = self.offsets(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        DMatrixView::from_slice(&params[w_off..w_off + n_in * n_out], n_out, n_in).into_owned()
    }

    /// Pre-activations of every layer for a `batch x input` matrix.
    fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut zs = Vec::with_capacity(self.n_layers());
        let mut a = x.clone();
        for l in 0..self.n_layers() {
            let (_, b_off) = self.offsets(l);
            let n_out = self.sizes[l + 1];
            let w = self.weights(params, l);
            let mut z = &a * w.transpose();
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(params[b_off + j]);
            }
            debug_assert_eq!(z.ncols(), n_out);
            if l + 1 < self.n_layers() {
                a = z.map(relu);
            }
            zs.push(z);
        }
        zs
    }

    pub fn predict(&self, q: &[f64]) -> f64 {
        let x = DMatrix::from_row_slice(1, q.len(), q);
        self.forward(&self.params, &x).last().unwrap()[(0, 0)]
    }

    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.forward(&self.params, x).last().unwrap().iter().copied().collect()
    }

    /// Batch loss and gradient at `params` for row-major inputs, one row
    /// per entry of `y`.
    pub fn loss_and_grad_rows(&self, params: &[f64], x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        let x = DMatrix::from_row_slice(y.len(), self.sizes[0], x);
        self.loss_and_grad(params, &x, y)
    }

    /// Mean squared error on the batch and its gradient w.r.t. `params`.
    pub(crate) fn loss_and_grad(&self, params: &[f64], x: &DMatrix<f64>, y: &[f64]) -> (f64, Vec<f64>) {
        let b = y.len() as f64;
        let zs = self.forward(params, x);
        let out = zs.last().unwrap();
        let resid: Vec<f64> = out.iter().zip(y).map(|(p, t)| p - t).collect();
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / b;
        let mut grad = vec![0.0; params.len()];
        let mut delta = DMatrix::from_iterator(y.len(), 1, resid.iter().map(|r| 2.0 * r / b));
        for l in (0..self.n_layers()).rev() {
            let (w_off, b_off) = self.offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let a_prev = if l == 0 { x.clone() } else { zs[l - 1].map(relu) };
            let gw = delta.transpose() * &a_prev;
            DMatrixViewMut::from_slice(&mut grad[w_off..w_off + n_in * n_out], n_out, n_in).copy_from(&gw);
            for (j, col) in delta.column_iter().enumerate() {
                grad[b_off + j] = col.sum();
            }
            if l > 0 {
                let w = self.weights(params, l);
                let mut d = &delta * w;
                d.zip_apply(&zs[l - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = d;
            }
        }
        (loss, grad)
    }

    fn mse(&self, x: &DMatrix<f64>, y: &[f64]) -> f64 {
        let p = self.predict_batch(x);
        p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
    }
}

fn relu(z: f64) -> f64 {
    z.max(0.0)
}

fn rows(ds: &WindowedDataset, idx: &[usize]) -> DMatrix<f64> {
    let w = ds.width();
    DMatrix::from_fn(idx.len(), w, |r, c| ds.x[idx[r] * w + c])
}

enum OptState {
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
    Sgd,
}

impl OptState {
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for i in 0..params.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Mini-batch training with early stopping on the time-ordered validation
/// tail; the best-validation weights are restored at the end.
pub fn fit_mlp(train: &WindowedDataset, hp: &Hyperparams, seed: u64) -> Result<(Mlp, MlpMeta)> {
    if hp.batch_size == 0 || hp.hidden_size == 0 || hp.num_layers == 0 {
        return Err(Error::InvalidArgument(
            "batch_size, hidden_size and num_layers must be positive".into(),
        ));
    }
    if !(hp.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", hp.learning_rate)));
    }
    let (fit_ds, val_ds) = train.validation_split(VALIDATION_FRAC);
    let mut sizes = vec![train.width()];
    sizes.extend(std::iter::repeat_n(hp.hidden_size, hp.num_layers));
    sizes.push(1);
    let mut net = Mlp::new(sizes, &mut rng_from(seed, &[0]));
    let mut shuffle_rng = rng_from(seed, &[1]);

    let all: Vec<usize> = (0..fit_ds.len()).collect();
    let fit_x = rows(&fit_ds, &all);
    let val = val_ds.as_ref().map(|v| (rows(v, &(0..v.len()).collect::<Vec<_>>()), v.y.clone()));
    let validate = |net: &Mlp| match &val {
        Some((x, y)) => net.mse(x, y),
        None => net.mse(&fit_x, &fit_ds.y),
    };

    let mut opt = match hp.optimizer {
        Optimizer::Adam => OptState::Adam {
            m: vec![0.0; net.params.len()],
            v: vec![0.0; net.params.len()],
            t: 0,
        },
        Optimizer::Sgd => OptState::Sgd,
    };
    let mut meta = MlpMeta {
        train_loss: net.mse(&fit_x, &fit_ds.y),
        valid_loss: validate(&net),
        ..MlpMeta::default()
    };
    let mut best = (meta.valid_loss, net.params.clone());
    let mut order = all;
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let x = rows(&fit_ds, batch);
            let y: Vec<f64> = batch.iter().map(|&i| fit_ds.y[i]).collect();
            let (loss, grad) = net.loss_and_grad(&net.params, &x, &y);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, learning_rate: hp.learning_rate });
            }
            sum += loss * batch.len() as f64;
            opt.step(&mut net.params, &grad, hp.learning_rate);
        }
        meta.epochs_run = epoch;
        meta.train_loss = sum / fit_ds.len() as f64;
        let v = validate(&net);
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, learning_rate: hp.learning_rate });
        }
        if v < best.0 || meta.best_epoch == 0 {
            best = (v, net.params.clone());
            meta.best_epoch = epoch;
            meta.valid_loss = v;
        } else if epoch - meta.best_epoch >= hp.patience {
            break;
        }
    }
    net.params = best.1;
    Ok((net, meta))
}
