//! Wire types for API version 1.
//!
//! Every float travels as a decimal string with 17 significant digits, so a
//! value survives the round trip bit for bit on any platform.

use serde::{Deserialize, Serialize};
use slice_forecast::learners::{Hyperparams, ModelKind, TrainedModel};
use slice_forecast::numfmt::{fmt_f64, parse_f64};

pub const API_VERSION: &str = "1";

fn api_version() -> String {
    API_VERSION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub api_version: String,
    pub status: String,
    pub models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub kind: ModelKind,
    pub window: usize,
    pub feature_names: Vec<String>,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub epochs_run: usize,
    pub train_loss: String,
    pub valid_loss: String,
    pub n_train: usize,
}

impl ModelInfo {
    pub fn of(id: &str, m: &TrainedModel) -> ModelInfo {
        ModelInfo {
            id: id.to_string(),
            kind: m.kind,
            window: m.window,
            feature_names: m.feature_names.clone(),
            seed: m.seed,
            hyperparams: m.hyperparams.clone(),
            epochs_run: m.meta.epochs_run,
            train_loss: fmt_f64(m.meta.train_loss),
            valid_loss: fmt_f64(m.meta.valid_loss),
            n_train: m.meta.n_train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelList {
    pub api_version: String,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLoaded {
    pub api_version: String,
    /// False when an identical model was already in the catalog.
    pub created: bool,
    pub model: ModelInfo,
}

/// A raw (unscaled) metric window: `window` rows of `feature_names` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    #[serde(default = "api_version")]
    pub api_version: String,
    pub model_id: String,
    pub feature_names: Vec<String>,
    pub window: Vec<Vec<String>>,
    /// Most recent observed latency, ms; needed by the persistence model
    /// unless the window carries the target as its last column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_target_ms: Option<String>,
}

impl PredictRequest {
    pub fn new(model_id: &str, feature_names: &[String], rows: &[&[f64]], last_target_ms: Option<f64>) -> Self {
        PredictRequest {
            api_version: api_version(),
            model_id: model_id.to_string(),
            feature_names: feature_names.to_vec(),
            window: rows.iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect()).collect(),
            last_target_ms: last_target_ms.map(fmt_f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub api_version: String,
    pub model_id: String,
    pub forecast_ms: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaRequest {
    #[serde(flatten)]
    pub predict: PredictRequest,
    pub threshold_ms: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaVerdict {
    pub api_version: String,
    pub model_id: String,
    pub forecast_ms: String,
    pub threshold_ms: String,
    /// `forecast_ms <= threshold_ms`.
    pub conforms: bool,
    /// `threshold_ms - forecast_ms`.
    pub margin_ms: String,
}

impl SlaVerdict {
    pub fn new(model_id: &str, forecast_ms: f64, threshold_ms: f64) -> SlaVerdict {
        SlaVerdict {
            api_version: api_version(),
            model_id: model_id.to_string(),
            forecast_ms: fmt_f64(forecast_ms),
            threshold_ms: fmt_f64(threshold_ms),
            conforms: forecast_ms <= threshold_ms,
            margin_ms: fmt_f64(threshold_ms - forecast_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: serde_json::Value,
}

/// Parses a wire float; `None` on malformed input.
pub fn parse_wire(s: &str) -> Option<f64> {
    parse_f64(s)
}

pub fn version() -> String {
    api_version()
}
