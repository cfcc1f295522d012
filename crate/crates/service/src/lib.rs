//! Predictor API: a catalog of persisted forecasting models behind HTTP.
//!
//! Models are immutable once loaded and keyed by content hash. Requests
//! carry raw metric windows; the model's own scaler is applied server side.

pub mod api;
pub mod error;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;

use slice_forecast::learners::{read_model, ModelKind, TrainedModel};

pub use api::*;
pub use error::ApiError;

/// Shared, concurrently readable model catalog.
#[derive(Clone, Default)]
pub struct AppState {
    catalog: Arc<RwLock<BTreeMap<String, Arc<TrainedModel>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a model under its content id. Returns the id and whether it
    /// was new.
    pub fn insert(&self, model: TrainedModel) -> (String, bool) {
        let id = model.content_id();
        let mut cat = self.catalog.write().expect("catalog lock");
        let created = !cat.contains_key(&id);
        if created {
            cat.insert(id.clone(), Arc::new(model));
        }
        (id, created)
    }

    pub fn load_bytes(&self, bytes: &[u8]) -> Result<(String, bool), ApiError> {
        let model = read_model(bytes)?;
        Ok(self.insert(model))
    }

    pub fn load_file(&self, path: &Path) -> Result<(String, bool), ApiError> {
        let bytes = std::fs::read(path).map_err(|e| {
            ApiError::bad_request(format!("cannot read {}: {e}", path.display()))
        })?;
        self.load_bytes(&bytes)
    }

    /// Loads every `*.model` file in `dir`, in name order.
    pub fn load_dir(&self, dir: &Path) -> Result<Vec<String>, ApiError> {
        let rd = std::fs::read_dir(dir)
            .map_err(|e| ApiError::bad_request(format!("cannot read {}: {e}", dir.display())))?;
        let mut paths: Vec<_> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "model"))
            .collect();
        paths.sort();
        paths.iter().map(|p| self.load_file(p).map(|(id, _)| id)).collect()
    }

    pub fn get(&self, id: &str) -> Option<Arc<TrainedModel>> {
        self.catalog.read().expect("catalog lock").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.catalog.read().expect("catalog lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        let cat = self.catalog.read().expect("catalog lock");
        cat.iter().map(|(id, m)| ModelInfo::of(id, m)).collect()
    }

    /// Forecast in ms for one request; the same path backs both endpoints.
    pub fn forecast(&self, req: &PredictRequest) -> Result<f64, ApiError> {
        if req.api_version != API_VERSION {
            return Err(ApiError::bad_request(format!(
                "unsupported api_version `{}`, expected `{API_VERSION}`",
                req.api_version
            )));
        }
        let model = self.get(&req.model_id).ok_or_else(|| ApiError::not_found(&req.model_id))?;
        model.check_schema(&req.feature_names)?;
        let f = model.feature_names.len();
        let shape = json!({ "rows": model.window, "columns": f });
        if req.window.len() != model.window {
            return Err(ApiError::validation(format!(
                "expected {} rows of {f} values, got {} rows",
                model.window,
                req.window.len()
            ))
            .with_detail(shape));
        }
        let mut flat = Vec::with_capacity(model.width());
        for (r, row) in req.window.iter().enumerate() {
            if row.len() != f {
                return Err(ApiError::validation(format!(
                    "expected {} rows of {f} values, row {r} has {} values",
                    model.window,
                    row.len()
                ))
                .with_detail(shape));
            }
            for (c, s) in row.iter().enumerate() {
                let v = parse_wire(s).ok_or_else(|| {
                    ApiError::validation(format!("window[{r}][{c}] is not a number: `{s}`"))
                })?;
                flat.push(v);
            }
        }
        let last = match &req.last_target_ms {
            Some(s) => Some(
                parse_wire(s)
                    .ok_or_else(|| ApiError::validation(format!("last_target_ms is not a number: `{s}`")))?,
            ),
            None => lagged_target(&model, &flat),
        };
        if model.kind == ModelKind::Persistence && last.is_none() {
            return Err(ApiError::validation(
                "persistence model needs last_target_ms or a lagged-target column",
            ));
        }
        Ok(model.forecast_raw(&flat, last)?)
    }

    pub fn sla_check(&self, req: &SlaRequest) -> Result<SlaVerdict, ApiError> {
        let threshold = parse_wire(&req.threshold_ms)
            .ok_or_else(|| ApiError::validation(format!("threshold_ms is not a number: `{}`", req.threshold_ms)))?;
        if !(threshold > 0.0) || !threshold.is_finite() {
            return Err(ApiError::validation("threshold_ms must be positive and finite"));
        }
        let forecast = self.forecast(&req.predict)?;
        Ok(SlaVerdict::new(&req.predict.model_id, forecast, threshold))
    }
}

// When the window carries the lagged target as its extra last column, the
// final row holds the most recent observation.
fn lagged_target(model: &TrainedModel, flat: &[f64]) -> Option<f64> {
    let f = model.feature_names.len();
    (f == model.scaler.n_features() + 1).then(|| flat[flat.len() - 1])
}

fn parse_json<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let body = body.map_err(|e| {
        let status = e.status();
        if status == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(status, "payload_too_large", e.body_text())
        } else {
            ApiError::bad_request(e.body_text())
        }
    })?;
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        api_version: version(),
        status: "ok".into(),
        models: s.len(),
    })
}

async fn list_models(State(s): State<AppState>) -> Json<ModelList> {
    Json(ModelList {
        api_version: version(),
        models: s.list(),
    })
}

async fn upload_model(State(s): State<AppState>, mut mp: Multipart) -> Result<Json<ModelLoaded>, ApiError> {
    let field = mp
        .next_field()
        .await
        .map_err(multipart_error)?
        .ok_or_else(|| ApiError::bad_request("multipart body has no model file"))?;
    let bytes = field.bytes().await.map_err(multipart_error)?;
    let (id, created) = s.load_bytes(&bytes)?;
    let model = s.get(&id).expect("just inserted");
    Ok(Json(ModelLoaded {
        api_version: version(),
        created,
        model: ModelInfo::of(&id, &model),
    }))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "payload_too_large", e.body_text())
    } else {
        ApiError::bad_request(e.body_text())
    }
}

async fn predict(State(s): State<AppState>, body: Result<Bytes, BytesRejection>) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = parse_json(body)?;
    let y = s.forecast(&req)?;
    Ok(Json(PredictResponse {
        api_version: version(),
        model_id: req.model_id,
        forecast_ms: slice_forecast::numfmt::fmt_f64(y),
    }))
}

async fn sla_check(State(s): State<AppState>, body: Result<Bytes, BytesRejection>) -> Result<Json<SlaVerdict>, ApiError> {
    let req: SlaRequest = parse_json(body)?;
    Ok(Json(s.sla_check(&req)?))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(list_models).post(upload_model))
        .route("/predict", post(predict))
        .route("/sla/check", post(sla_check))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState, max_body_bytes: usize) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
