use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasetgen::WindowedDataset;
use crate::numfmt::{f17, f17_vec};
use crate::{Error, Result};

/// L2-regularized linear regression with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    #[serde(with = "f17_vec")]
    pub coef: Vec<f64>,
    #[serde(with = "f17")]
    pub intercept: f64,
}

pub fn fit_ridge(train: &WindowedDataset, lambda: f64) -> Result<Ridge> {
    solve_ridge(&train.x, train.width(), &train.y, lambda)
}

/// Solves `(Xc'Xc + lambda I) b = Xc'yc` on centered data by Cholesky.
pub fn solve_ridge(x: &[f64], width: usize, y: &[f64], lambda: f64) -> Result<Ridge> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge_lambda must be >= 0, got {lambda}")));
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptySplit("no training windows".into()));
    }
    let mut xm = DMatrix::from_row_slice(n, width, x);
    let x_mean: Vec<f64> = (0..width).map(|j| xm.column(j).sum() / n as f64).collect();
    for (j, m) in x_mean.iter().enumerate() {
        xm.column_mut(j).add_scalar_mut(-m);
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let xt = xm.transpose();
    let mut gram = &xt * &xm;
    for j in 0..width {
        gram[(j, j)] += lambda;
    }
    let rhs = &xt * yc;
    let chol = gram.clone().cholesky().ok_or(Error::Singular)?;
    // numerically rank-deficient systems can slip through the factorization
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..width).map(|j| l[(j, j)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if lambda == 0.0 && width > 0 && (max == 0.0 || min / max < 1e-7) {
        return Err(Error::Singular);
    }
    let coef = chol.solve(&rhs);
    let intercept = y_mean - coef.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(Ridge {
        coef: coef.iter().copied().collect(),
        intercept,
    })
}

impl Ridge {
    pub fn predict(&self, q: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(q).map(|(b, v)| b * v).sum::<f64>()
    }
}
