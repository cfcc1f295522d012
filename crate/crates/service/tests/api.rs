use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::Value;
use slice_forecast::config::ExperimentConfig;
use slice_forecast::learners::{write_model, Hyperparams, ModelKind, TrainedModel};
use slice_forecast::numfmt::{fmt_f64, parse_f64};
use slice_forecast::pipeline::{generate, prepare, train, Prepared};
use slice_forecast::simcluster::OpType;
use slice_forecast_service::*;
use tower::ServiceExt;

const LIMIT: usize = 1 << 20;

struct Fixture {
    prepared: Prepared,
    lagged: Prepared,
}

fn small_config(lagged: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.workload.row_budget = 3000;
    c.workload.warmup_rows = 200;
    c.dataset.window = 5;
    c.dataset.include_lagged_target = lagged;
    c
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config(false);
        let g = generate(&cfg.simulator.profiles[0], OpType::Write, &cfg, 3).unwrap();
        Fixture {
            prepared: prepare(&g.table, &cfg, None).unwrap(),
            lagged: prepare(&g.table, &small_config(true), None).unwrap(),
        }
    })
}

fn quick_hp() -> Hyperparams {
    Hyperparams {
        epochs: 3,
        n_trees: 4,
        ..Hyperparams::default()
    }
}

fn model(kind: ModelKind) -> TrainedModel {
    train(&fixture().prepared, kind, &quick_hp(), 1).unwrap()
}

fn bytes_of(m: &TrainedModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(m, &mut buf).unwrap();
    buf
}

/// Raw rows `i..i+w` of the test table, plus the raw target column when lagged.
fn raw_window(p: &Prepared, i: usize, lagged: bool) -> Vec<Vec<f64>> {
    let t = &p.test_table;
    (i..i + p.test.window)
        .map(|r| {
            let mut row = t.features[r].clone();
            if lagged {
                row.push(t.target[r]);
            }
            row
        })
        .collect()
}

fn request(m: &TrainedModel, id: &str, rows: &[Vec<f64>], last: Option<f64>) -> PredictRequest {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    PredictRequest::new(id, &m.feature_names, &refs, last)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn post_json<T: serde::Serialize>(app: &Router, uri: &str, body: &T) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    call(app, req).await
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn multipart(file: &[u8]) -> Request<Body> {
    let boundary = "XBOUNDARYX";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"model\"; filename=\"m.model\"\r\n\
             Content-Type: application/octet-stream\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(file);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    Request::post("/models")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

fn de<T: DeserializeOwned>(v: Value) -> T {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn health_and_empty_catalog() {
    let app = router(AppState::new(), LIMIT);
    let (s, v) = get(&app, "/health").await;
    assert_eq!(s, StatusCode::OK);
    let h: Health = de(v);
    assert_eq!(h.api_version, "1");
    assert_eq!(h.models, 0);
    let (s, v) = get(&app, "/models").await;
    assert_eq!(s, StatusCode::OK);
    assert!(de::<ModelList>(v).models.is_empty());
}

#[tokio::test]
async fn upload_twice_gives_one_entry() {
    let m = model(ModelKind::Ridge);
    let file = bytes_of(&m);
    let app = router(AppState::new(), LIMIT);
    let (s, v) = call(&app, multipart(&file)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let first: ModelLoaded = de(v);
    assert!(first.created);
    assert_eq!(first.model.id, m.content_id());
    assert_eq!(first.model.kind, ModelKind::Ridge);
    let (_, v) = call(&app, multipart(&file)).await;
    let second: ModelLoaded = de(v);
    assert!(!second.created);
    assert_eq!(second.model.id, first.model.id);
    let (_, v) = get(&app, "/models").await;
    let list: ModelList = de(v);
    assert_eq!(list.models.len(), 1);
    assert_eq!(list.models[0], first.model);
}

#[tokio::test]
async fn corrupted_upload_names_field() {
    let file = bytes_of(&model(ModelKind::Ridge));
    let text = String::from_utf8(file).unwrap().replace("format_version: 1", "format_version: 9");
    let app = router(AppState::new(), LIMIT);
    let (s, v) = call(&app, multipart(text.as_bytes())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let e: ErrorBody = de(v);
    assert_eq!(e.code, "model_format");
    assert_eq!(e.detail["field"], "format_version");
    assert!(e.message.contains("format_version"), "{}", e.message);
}

#[tokio::test]
async fn predictions_match_library_bit_exact() {
    let f = fixture();
    for kind in ModelKind::ALL {
        let lagged = kind == ModelKind::Persistence;
        let p = if lagged { &f.lagged } else { &f.prepared };
        let m = train(p, kind, &quick_hp(), 1).unwrap();
        let state = AppState::new();
        let (id, _) = state.load_bytes(&bytes_of(&m)).unwrap();
        let app = router(state, LIMIT);
        let lib: Vec<f64> = m
            .predict_dataset(&p.test)
            .unwrap()
            .into_iter()
            .map(|y| m.scaler.unscale_target(y))
            .collect();
        for i in (0..p.test.len()).step_by(p.test.len() / 7 + 1) {
            let req = request(&m, &id, &raw_window(p, i, lagged), None);
            let (s, v) = post_json(&app, "/predict", &req).await;
            assert_eq!(s, StatusCode::OK, "{kind}: {v}");
            let r: PredictResponse = de(v);
            assert_eq!(r.model_id, id);
            let got = parse_f64(&r.forecast_ms).unwrap();
            assert_eq!(got.to_bits(), lib[i].to_bits(), "{kind} window {i}: {got} vs {}", lib[i]);
        }
    }
}

#[tokio::test]
async fn short_window_is_a_validation_error() {
    let f = fixture();
    let m = model(ModelKind::Tree);
    let state = AppState::new();
    let (id, _) = state.load_bytes(&bytes_of(&m)).unwrap();
    let app = router(state, LIMIT);
    let mut rows = raw_window(&f.prepared, 0, false);
    rows.pop();
    let (s, v) = post_json(&app, "/predict", &request(&m, &id, &rows, None)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let e: ErrorBody = de(v);
    assert_eq!(e.code, "validation");
    assert!(e.message.starts_with("expected 5 rows"), "{}", e.message);
    assert_eq!(e.detail["rows"], 5);
    assert_eq!(e.detail["columns"], m.feature_names.len());
}

#[tokio::test]
async fn schema_and_id_errors() {
    let f = fixture();
    let m = model(ModelKind::Knn);
    let state = AppState::new();
    let (id, _) = state.load_bytes(&bytes_of(&m)).unwrap();
    let app = router(state, LIMIT);
    let rows = raw_window(&f.prepared, 0, false);

    let (s, v) = post_json(&app, "/predict", &request(&m, "0000000000000000", &rows, None)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(de::<ErrorBody>(v).code, "not_found");

    let mut req = request(&m, &id, &rows, None);
    req.feature_names.swap(0, 1);
    let (s, v) = post_json(&app, "/predict", &req).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(de::<ErrorBody>(v).code, "validation");

    let mut req = request(&m, &id, &rows, None);
    req.window[2][1] = "abc".into();
    let (s, _) = post_json(&app, "/predict", &req).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::post("/predict").body(Body::from("{not json")).unwrap();
    let (s, v) = call(&app, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(de::<ErrorBody>(v).code, "bad_request");

    let (s, v) = get(&app, "/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(de::<ErrorBody>(v).code, "not_found");
}

#[tokio::test]
async fn oversized_body_is_rejected() {
    let app = router(AppState::new(), 64);
    let req = Request::post("/predict").body(Body::from(vec![b' '; 1024])).unwrap();
    let (s, v) = call(&app, req).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(de::<ErrorBody>(v).code, "payload_too_large");
}

#[tokio::test]
async fn persistence_needs_a_last_target() {
    let f = fixture();
    let m = model(ModelKind::Persistence);
    let state = AppState::new();
    let (id, _) = state.load_bytes(&bytes_of(&m)).unwrap();
    let app = router(state, LIMIT);
    let rows = raw_window(&f.prepared, 0, false);
    let (s, _) = post_json(&app, "/predict", &request(&m, &id, &rows, None)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = post_json(&app, "/predict", &request(&m, &id, &rows, Some(17.25))).await;
    assert_eq!(s, StatusCode::OK);
    let y = parse_f64(&de::<PredictResponse>(v).forecast_ms).unwrap();
    assert!((y - 17.25).abs() < 1e-12, "{y}");
}

async fn verdict(app: &Router, id: &str, m: &TrainedModel, last: f64, threshold: f64) -> SlaVerdict {
    let rows = raw_window(&fixture().prepared, 0, false);
    let req = SlaRequest {
        predict: request(m, id, &rows, Some(last)),
        threshold_ms: fmt_f64(threshold),
    };
    let (s, v) = post_json(app, "/sla/check", &req).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    de(v)
}

#[tokio::test]
async fn sla_verdicts() {
    // Persistence echoes last_target, which pins the forecast exactly.
    let m = model(ModelKind::Persistence);
    let state = AppState::new();
    let (id, _) = state.load_bytes(&bytes_of(&m)).unwrap();
    let app = router(state, LIMIT);

    let v = verdict(&app, &id, &m, 12.0, 20.0).await;
    assert!(v.conforms);
    assert_eq!(parse_f64(&v.margin_ms), Some(8.0));

    let v = verdict(&app, &id, &m, 25.0, 20.0).await;
    assert!(!v.conforms);
    assert_eq!(parse_f64(&v.margin_ms), Some(-5.0));

    let v = verdict(&app, &id, &m, 20.0, 20.0).await;
    assert!(v.conforms);
    assert_eq!(parse_f64(&v.margin_ms), Some(0.0));

    let rows = raw_window(&fixture().prepared, 0, false);
    for bad in ["0", "-1", "NaN", "x"] {
        let req = SlaRequest {
            predict: request(&m, &id, &rows, Some(1.0)),
            threshold_ms: bad.into(),
        };
        let (s, _) = post_json(&app, "/sla/check", &req).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let f = fixture();
    let m = model(ModelKind::Forest);
    let state = AppState::new();
    let (id, _) = state.load_bytes(&bytes_of(&m)).unwrap();
    let app = router(state, LIMIT);
    let reqs: Vec<PredictRequest> = (0..4)
        .map(|i| request(&m, &id, &raw_window(&f.prepared, i, false), None))
        .collect();
    let mut handles = Vec::new();
    for k in 0..32 {
        let app = app.clone();
        let req = reqs[k % 4].clone();
        handles.push(tokio::spawn(async move {
            let (_, v) = post_json(&app, "/predict", &req).await;
            (k % 4, de::<PredictResponse>(v).forecast_ms)
        }));
    }
    let mut seen: [Option<String>; 4] = Default::default();
    for h in handles {
        let (i, y) = h.await.unwrap();
        match &seen[i] {
            Some(prev) => assert_eq!(prev, &y),
            None => seen[i] = Some(y),
        }
    }
}

#[test]
fn verdict_invariant_holds() {
    for (f, t) in [(1.0, 2.0), (2.0, 1.0), (3.5, 3.5), (0.1 + 0.2, 0.3)] {
        let v = SlaVerdict::new("m", f, t);
        assert_eq!(v.conforms, f <= t);
        assert_eq!(parse_f64(&v.margin_ms), Some(t - f));
    }
}
