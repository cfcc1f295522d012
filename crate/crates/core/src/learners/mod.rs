//! One-step-ahead regressors over flattened feature windows.
//!
//! Every learner consumes the `w * (n-1)` flattened window and predicts the
//! target in scaled units; inverse scaling happens at the evaluation and
//! serving boundary using the scaler stored in the model.

mod forest;
mod knn;
mod mlp;
mod persist;
mod ridge;
mod tree;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasetgen::{Scaler, WindowedDataset};
use crate::numfmt::f17;
use crate::{Error, Result};

pub use forest::{fit_forest, Forest};
pub use knn::{fit_knn, Knn};
pub use mlp::{fit_mlp, Mlp};
pub use persist::{load_model, read_model, save_model, write_model, FORMAT_MAGIC, FORMAT_VERSION};
pub use ridge::{fit_ridge, Ridge};
pub use tree::{fit_tree, Tree, TreeParams};

/// Fraction of the training windows (time-ordered tail) held out for early
/// stopping and tuning.
pub const VALIDATION_FRAC: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Knn,
    Tree,
    Forest,
    Ridge,
    Mlp,
    Persistence,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Knn,
        ModelKind::Tree,
        ModelKind::Forest,
        ModelKind::Ridge,
        ModelKind::Mlp,
        ModelKind::Persistence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Knn => "knn",
            ModelKind::Tree => "tree",
            ModelKind::Forest => "forest",
            ModelKind::Ridge => "ridge",
            ModelKind::Mlp => "mlp",
            ModelKind::Persistence => "persistence",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

/// Union of every learner's hyperparameters; each learner reads its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
    pub num_layers: usize,
    pub hidden_size: usize,
    /// Accepted for search-space compatibility; no learner here is recurrent.
    pub bidirectional: bool,
    pub k: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub n_trees: usize,
    pub feature_frac: f64,
    pub bootstrap: bool,
    pub ridge_lambda: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            batch_size: 32,
            learning_rate: 0.001,
            epochs: 50,
            patience: 10,
            optimizer: Optimizer::Adam,
            num_layers: 2,
            hidden_size: 50,
            bidirectional: false,
            k: 5,
            max_depth: Some(10),
            min_samples_leaf: 5,
            n_trees: 25,
            feature_frac: 0.33,
            bootstrap: true,
            ridge_lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    #[serde(with = "f17")]
    pub train_loss: f64,
    #[serde(with = "f17")]
    pub valid_loss: f64,
    /// Wall-clock fit time. Not persisted: it would make model files
    /// irreproducible.
    #[serde(skip)]
    pub train_time_s: f64,
    pub seed: u64,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Knn(Knn),
    Tree(Tree),
    Forest(Forest),
    Ridge(Ridge),
    Mlp(Mlp),
    Persistence,
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Knn(_) => ModelKind::Knn,
            ModelParams::Tree(_) => ModelKind::Tree,
            ModelParams::Forest(_) => ModelKind::Forest,
            ModelParams::Ridge(_) => ModelKind::Ridge,
            ModelParams::Mlp(_) => ModelKind::Mlp,
            ModelParams::Persistence => ModelKind::Persistence,
        }
    }
}

/// An immutable fitted model with everything needed to serve raw windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub window: usize,
    /// Per-row input columns, in order.
    pub feature_names: Vec<String>,
    pub scaler: Scaler,
    pub meta: TrainMeta,
    pub params: ModelParams,
}

/// Fits `kind` on scaled training windows.
pub fn fit(kind: ModelKind, train: &WindowedDataset, hp: &Hyperparams, seed: u64, scaler: &Scaler) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::EmptySplit("no training windows".into()));
    }
    let started = Instant::now();
    let mut meta = TrainMeta {
        seed,
        n_train: train.len(),
        ..TrainMeta::default()
    };
    let params = match kind {
        ModelKind::Knn => ModelParams::Knn(fit_knn(train, hp.k)?),
        ModelKind::Tree => ModelParams::Tree(fit_tree(
            train,
            &TreeParams {
                max_depth: hp.max_depth,
                min_samples_leaf: hp.min_samples_leaf,
                feature_frac: 1.0,
            },
            seed,
        )),
        ModelKind::Forest => ModelParams::Forest(fit_forest(train, hp, seed)?),
        ModelKind::Ridge => ModelParams::Ridge(fit_ridge(train, hp.ridge_lambda)?),
        ModelKind::Mlp => {
            let (net, m) = fit_mlp(train, hp, seed)?;
            meta.epochs_run = m.epochs_run;
            meta.best_epoch = m.best_epoch;
            meta.train_loss = m.train_loss;
            meta.valid_loss = m.valid_loss;
            ModelParams::Mlp(net)
        }
        ModelKind::Persistence => ModelParams::Persistence,
    };
    meta.train_time_s = started.elapsed().as_secs_f64();
    Ok(TrainedModel {
        kind,
        hyperparams: hp.clone(),
        seed,
        window: train.window,
        feature_names: train.feature_names.clone(),
        scaler: scaler.clone(),
        meta,
        params,
    })
}

impl TrainedModel {
    pub fn width(&self) -> usize {
        self.window * self.feature_names.len()
    }

    /// Predicts the scaled target for one scaled, flattened window.
    /// `last_target` (scaled) is required only by the persistence model.
    pub fn predict(&self, window: &[f64], last_target: Option<f64>) -> Result<f64> {
        if window.len() != self.width() {
            return Err(Error::FeatureMismatch(format!(
                "window has {} values, model expects {}",
                window.len(),
                self.width()
            )));
        }
        Ok(match &self.params {
            ModelParams::Knn(m) => m.predict(window),
            ModelParams::Tree(m) => m.predict(window),
            ModelParams::Forest(m) => m.predict(window),
            ModelParams::Ridge(m) => m.predict(window),
            ModelParams::Mlp(m) => m.predict(window),
            ModelParams::Persistence => persistence_predict(last_target)?,
        })
    }

    /// Scaled predictions for every window of `ds`.
    pub fn predict_dataset(&self, ds: &WindowedDataset) -> Result<Vec<f64>> {
        self.check_schema(&ds.feature_names)?;
        (0..ds.len())
            .map(|i| self.predict(ds.sample(i), Some(ds.last_target[i])))
            .collect()
    }

    /// Forecast in target units from a raw (unscaled) `window x features`
    /// matrix, flattened row-major. `last_target` is in target units too.
    pub fn forecast_raw(&self, raw_window: &[f64], last_target: Option<f64>) -> Result<f64> {
        let f = self.feature_names.len();
        if raw_window.len() != self.width() {
            return Err(Error::FeatureMismatch(format!(
                "expected {} rows of {f} values",
                self.window
            )));
        }
        let mut scaled = raw_window.to_vec();
        for row in scaled.chunks_mut(f) {
            self.scale_row(row);
        }
        let y = self.predict(&scaled, last_target.map(|t| self.scaler.scale_target(t)))?;
        Ok(self.scaler.unscale_target(y))
    }

    // The scaler covers table features; a lagged-target channel is scaled
    // with the target statistics.
    fn scale_row(&self, row: &mut [f64]) {
        let n = self.scaler.n_features();
        self.scaler.scale_row(&mut row[..n]);
        if row.len() == n + 1 {
            row[n] = self.scaler.scale_target(row[n]);
        }
    }

    pub fn check_schema(&self, names: &[String]) -> Result<()> {
        if names != self.feature_names.as_slice() {
            return Err(Error::FeatureMismatch(format!(
                "model expects {} features [{}], got {} [{}]",
                self.feature_names.len(),
                abbreviate(&self.feature_names),
                names.len(),
                abbreviate(names)
            )));
        }
        Ok(())
    }
}

fn abbreviate(names: &[String]) -> String {
    if names.len() <= 4 {
        names.join(", ")
    } else {
        format!("{}, {}, ..., {}", names[0], names[1], names[names.len() - 1])
    }
}

/// Repeats the most recent observed target.
pub fn persistence_predict(last_target: Option<f64>) -> Result<f64> {
    last_target.ok_or(Error::LaggedTargetUnavailable)
}
