//! Categorical Tree-structured Parzen Estimator over a finite grid.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasetgen::{Scaler, SplitTag, WindowedDataset};
use crate::evaluation::{mae, mape_with, ZeroPolicy};
use crate::learners::{fit, Hyperparams, ModelKind, Optimizer, VALIDATION_FRAC};
use crate::numfmt::fmt_f64;
use crate::rng::{derive_seed, rng_from};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Int(usize),
    Float(f64),
    /// `None` means unlimited.
    Limit(Option<usize>),
    Optim(Optimizer),
    Flag(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Limit(Some(v)) => write!(f, "{v}"),
            Value::Limit(None) => f.write_str("none"),
            Value::Optim(Optimizer::Adam) => f.write_str("adam"),
            Value::Optim(Optimizer::Sgd) => f.write_str("sgd"),
            Value::Flag(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

fn dim(name: &str, values: Vec<Value>) -> Dimension {
    Dimension { name: name.into(), values }
}

fn ints(xs: &[usize]) -> Vec<Value> {
    xs.iter().map(|&v| Value::Int(v)).collect()
}

fn floats(xs: &[f64]) -> Vec<Value> {
    xs.iter().map(|&v| Value::Float(v)).collect()
}

impl SearchSpace {
    /// The neural-network grid: batch size, learning rate, epochs, patience,
    /// optimizer, depth, width and the (ignored) bidirectional flag.
    pub fn full() -> SearchSpace {
        SearchSpace {
            dims: vec![
                dim("batch_size", ints(&[8, 16, 32])),
                dim("learning_rate", floats(&[0.1, 0.01, 0.001])),
                dim("epochs", ints(&[20, 50, 100])),
                dim("patience", ints(&[5, 10, 50])),
                dim("optimizer", vec![Value::Optim(Optimizer::Adam), Value::Optim(Optimizer::Sgd)]),
                dim("num_layers", ints(&[1, 2, 3, 4, 5])),
                dim("hidden_size", ints(&[50, 100, 200])),
                dim("bidirectional", vec![Value::Flag(false), Value::Flag(true)]),
            ],
        }
    }

    pub fn for_model(kind: ModelKind) -> SearchSpace {
        let dims = match kind {
            ModelKind::Mlp => return SearchSpace::full(),
            ModelKind::Knn => vec![dim("k", ints(&[1, 3, 5, 10, 20, 50]))],
            ModelKind::Tree => vec![
                dim("max_depth", vec![3, 5, 8, 12].into_iter().map(Some).chain([None]).map(Value::Limit).collect()),
                dim("min_samples_leaf", ints(&[1, 2, 5, 10, 20])),
            ],
            ModelKind::Forest => vec![
                dim("n_trees", ints(&[10, 25, 50])),
                dim("feature_frac", floats(&[0.1, 0.33, 0.5, 1.0])),
                dim("max_depth", vec![Value::Limit(Some(5)), Value::Limit(Some(10)), Value::Limit(None)]),
                dim("min_samples_leaf", ints(&[1, 5, 10])),
            ],
            ModelKind::Ridge => vec![dim("ridge_lambda", floats(&[0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]))],
            ModelKind::Persistence => Vec::new(),
        };
        SearchSpace { dims }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::EmptySpace);
        }
        if let Some(d) = self.dims.iter().find(|d| d.values.is_empty()) {
            return Err(Error::InvalidArgument(format!("dimension `{}` has no values", d.name)));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.dims.iter().map(|d| d.values.len()).product()
    }

    /// Writes the chosen values into a copy of `base`.
    pub fn apply(&self, base: &Hyperparams, choice: &[usize]) -> Result<Hyperparams> {
        let mut hp = base.clone();
        for (d, &i) in self.dims.iter().zip(choice) {
            let v = *d
                .values
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("index {i} outside `{}`", d.name)))?;
            set_param(&mut hp, &d.name, v)?;
        }
        Ok(hp)
    }

    /// Position of `hp`'s value in every dimension, if all are members.
    pub fn locate(&self, hp: &Hyperparams) -> Option<Vec<usize>> {
        self.dims
            .iter()
            .map(|d| d.values.iter().position(|&v| get_param(hp, &d.name) == Some(v)))
            .collect()
    }
}

fn set_param(hp: &mut Hyperparams, name: &str, v: Value) -> Result<()> {
    match (name, v) {
        ("batch_size", Value::Int(x)) => hp.batch_size = x,
        ("learning_rate", Value::Float(x)) => hp.learning_rate = x,
        ("epochs", Value::Int(x)) => hp.epochs = x,
        ("patience", Value::Int(x)) => hp.patience = x,
        ("optimizer", Value::Optim(x)) => hp.optimizer = x,
        ("num_layers", Value::Int(x)) => hp.num_layers = x,
        ("hidden_size", Value::Int(x)) => hp.hidden_size = x,
        ("bidirectional", Value::Flag(x)) => hp.bidirectional = x,
        ("k", Value::Int(x)) => hp.k = x,
        ("max_depth", Value::Limit(x)) => hp.max_depth = x,
        ("min_samples_leaf", Value::Int(x)) => hp.min_samples_leaf = x,
        ("n_trees", Value::Int(x)) => hp.n_trees = x,
        ("feature_frac", Value::Float(x)) => hp.feature_frac = x,
        ("bootstrap", Value::Flag(x)) => hp.bootstrap = x,
        ("ridge_lambda", Value::Float(x)) => hp.ridge_lambda = x,
        _ => return Err(Error::InvalidArgument(format!("`{name}` cannot take value {v:?}"))),
    }
    Ok(())
}

fn get_param(hp: &Hyperparams, name: &str) -> Option<Value> {
    Some(match name {
        "batch_size" => Value::Int(hp.batch_size),
        "learning_rate" => Value::Float(hp.learning_rate),
        "epochs" => Value::Int(hp.epochs),
        "patience" => Value::Int(hp.patience),
        "optimizer" => Value::Optim(hp.optimizer),
        "num_layers" => Value::Int(hp.num_layers),
        "hidden_size" => Value::Int(hp.hidden_size),
        "bidirectional" => Value::Flag(hp.bidirectional),
        "k" => Value::Int(hp.k),
        "max_depth" => Value::Limit(hp.max_depth),
        "min_samples_leaf" => Value::Int(hp.min_samples_leaf),
        "n_trees" => Value::Int(hp.n_trees),
        "feature_frac" => Value::Float(hp.feature_frac),
        "bootstrap" => Value::Flag(hp.bootstrap),
        "ridge_lambda" => Value::Float(hp.ridge_lambda),
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub choice: Vec<usize>,
    pub hyperparams: Hyperparams,
    /// `None` for failed trials.
    pub objective: Option<f64>,
    pub train_time_s: f64,
    pub seed: u64,
    pub status: TrialStatus,
    pub error: Option<String>,
}

fn uniform_choice<R: Rng>(space: &SearchSpace, rng: &mut R) -> Vec<usize> {
    space.dims.iter().map(|d| rng.random_range(0..d.values.len())).collect()
}

/// Suggests the next configuration from the completed trials in `history`.
pub fn tpe_suggest<R: Rng>(history: &[TrialResult], space: &SearchSpace, cfg: &TpeConfig, rng: &mut R) -> Result<Vec<usize>> {
    space.validate()?;
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {} outside (0, 1)", cfg.gamma)));
    }
    let mut ok: Vec<(f64, usize, &[usize])> = history
        .iter()
        .filter_map(|t| t.objective.map(|o| (o, t.trial, t.choice.as_slice())))
        .collect();
    if ok.len() < cfg.n_startup.max(1) {
        return Ok(uniform_choice(space, rng));
    }
    ok.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_good = ((cfg.gamma * ok.len() as f64).ceil() as usize).max(1);
    let (good, bad) = ok.split_at(n_good);

    // per dimension: add-one smoothed categorical densities
    let density = |set: &[(f64, usize, &[usize])], d: usize| -> Vec<f64> {
        let k = space.dims[d].values.len();
        let mut counts = vec![1.0; k];
        for (_, _, c) in set {
            counts[c[d]] += 1.0;
        }
        let total = set.len() as f64 + k as f64;
        counts.into_iter().map(|c| c / total).collect()
    };
    let l: Vec<Vec<f64>> = (0..space.dims.len()).map(|d| density(good, d)).collect();
    let g: Vec<Vec<f64>> = (0..space.dims.len()).map(|d| density(bad, d)).collect();

    // Re-running a finished configuration teaches little, so unseen
    // candidates win over seen ones regardless of score.
    let seen: HashSet<&[usize]> = history.iter().map(|t| t.choice.as_slice()).collect();
    let mut best: Option<(bool, f64, Vec<usize>)> = None;
    for _ in 0..cfg.n_candidates.max(1) {
        let cand: Vec<usize> = l.iter().map(|p| draw(p, rng)).collect();
        let fresh = !seen.contains(cand.as_slice());
        let score: f64 = cand
            .iter()
            .enumerate()
            .map(|(d, &i)| l[d][i].ln() - g[d][i].ln())
            .sum();
        if best.as_ref().is_none_or(|(f, s, _)| (fresh, score) > (*f, *s)) {
            best = Some((fresh, score, cand));
        }
    }
    Ok(best.unwrap().2)
}

fn draw<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Something a study can minimize.
pub trait Objective: Sync {
    fn evaluate(&self, hp: &Hyperparams, seed: u64) -> Result<f64>;
}

impl<F: Fn(&Hyperparams, u64) -> Result<f64> + Sync> Objective for F {
    fn evaluate(&self, hp: &Hyperparams, seed: u64) -> Result<f64> {
        self(hp, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mape,
    Mae,
}

/// Fits on the head of a training split and scores the time-ordered
/// validation tail in milliseconds. Never sees test data.
pub struct ModelObjective {
    kind: ModelKind,
    fit_part: WindowedDataset,
    valid: WindowedDataset,
    scaler: Scaler,
    metric: Metric,
}

impl ModelObjective {
    pub fn new(kind: ModelKind, train: &WindowedDataset, scaler: &Scaler, metric: Metric) -> Result<Self> {
        if train.provenance.split == SplitTag::Test {
            return Err(Error::InvalidArgument("tuning must not see the test split".into()));
        }
        let (fit_part, valid) = train.validation_split(VALIDATION_FRAC);
        let valid = valid.ok_or_else(|| {
            Error::EmptySplit(format!("{} training windows leave no validation tail", train.len()))
        })?;
        Ok(ModelObjective {
            kind,
            fit_part,
            valid,
            scaler: scaler.clone(),
            metric,
        })
    }
}

impl Objective for ModelObjective {
    fn evaluate(&self, hp: &Hyperparams, seed: u64) -> Result<f64> {
        let model = fit(self.kind, &self.fit_part, hp, seed, &self.scaler)?;
        let pred: Vec<f64> = model
            .predict_dataset(&self.valid)?
            .into_iter()
            .map(|v| self.scaler.unscale_target(v))
            .collect();
        let actual: Vec<f64> = self.valid.y.iter().map(|&v| self.scaler.unscale_target(v)).collect();
        match self.metric {
            Metric::Mape => mape_with(&actual, &pred, ZeroPolicy::Exclude).map(|(m, _)| m),
            Metric::Mae => mae(&actual, &pred),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n_trials: usize,
    pub seed: u64,
    pub tpe: TpeConfig,
    /// Trials evaluated concurrently; only width 1 is order-reproducible
    /// by contract, though the batching here is deterministic at any width.
    pub width: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_trials: 50,
            seed: 0,
            tpe: TpeConfig::default(),
            width: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub space: SearchSpace,
    pub trials: Vec<TrialResult>,
    pub best: usize,
    pub width: usize,
}

impl Study {
    pub fn best_trial(&self) -> &TrialResult {
        &self.trials[self.best]
    }
}

/// Runs `cfg.n_trials` suggestions against `objective`. Trials are issued in
/// batches of `width`; each suggestion sees every trial finished before its
/// batch started.
pub fn run_study(objective: &dyn Objective, space: &SearchSpace, base: &Hyperparams, cfg: &StudyConfig) -> Result<Study> {
    space.validate()?;
    if cfg.n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    let width = cfg.width.max(1);
    let mut trials: Vec<TrialResult> = Vec::with_capacity(cfg.n_trials);
    while trials.len() < cfg.n_trials {
        let start = trials.len();
        let batch: Vec<(usize, Vec<usize>)> = (start..(start + width).min(cfg.n_trials))
            .map(|t| {
                let mut rng = rng_from(cfg.seed, &[1, t as u64]);
                tpe_suggest(&trials, space, &cfg.tpe, &mut rng).map(|c| (t, c))
            })
            .collect::<Result<_>>()?;
        let run = |(t, choice): (usize, Vec<usize>)| -> TrialResult {
            let seed = derive_seed(cfg.seed, &[2, t as u64]);
            let hp = space.apply(base, &choice).expect("suggestion inside space");
            let started = Instant::now();
            let out = objective.evaluate(&hp, seed);
            let train_time_s = started.elapsed().as_secs_f64();
            let (objective, status, error) = match out {
                Ok(v) if v.is_finite() => (Some(v), TrialStatus::Ok, None),
                Ok(v) => (None, TrialStatus::Failed, Some(format!("non-finite objective {v}"))),
                Err(e) => (None, TrialStatus::Failed, Some(e.to_string())),
            };
            TrialResult {
                trial: t,
                choice,
                hyperparams: hp,
                objective,
                train_time_s,
                seed,
                status,
                error,
            }
        };
        let done: Vec<TrialResult> = if width == 1 {
            batch.into_iter().map(run).collect()
        } else {
            batch.into_par_iter().map(run).collect()
        };
        trials.extend(done);
    }
    let best = trials
        .iter()
        .filter_map(|t| t.objective.map(|o| (o, t.trial)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, t)| t)
        .ok_or(Error::AllTrialsFailed(trials.len()))?;
    Ok(Study {
        space: space.clone(),
        trials,
        best,
        width,
    })
}

/// One row per trial: `trial,<dimensions...>,objective,train_time_s,status`.
pub fn write_study_csv<W: Write>(study: &Study, mut out: W) -> Result<()> {
    let mut s = String::from("trial");
    for d in &study.space.dims {
        s.push(',');
        s.push_str(&d.name);
    }
    s.push_str(",objective,train_time_s,status\n");
    for t in &study.trials {
        s.push_str(&t.trial.to_string());
        for (d, &i) in study.space.dims.iter().zip(&t.choice) {
            s.push_str(&format!(",{}", d.values[i]));
        }
        let obj = t.objective.map(fmt_f64).unwrap_or_default();
        let status = match t.status {
            TrialStatus::Ok => "ok",
            TrialStatus::Failed => "failed",
        };
        s.push_str(&format!(",{obj},{},{status}\n", fmt_f64(t.train_time_s)));
    }
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<study>", e))
}
