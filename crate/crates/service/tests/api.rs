use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array3;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use timgan_core::editor::{Model, ModelConfig};
use timgan_core::image_io::{decode_png, encode_png};
use timgan_service::{router, CreateResponse, EditResponse, ErrorBody, HistoryResponse, ServiceConfig};
use tower::ServiceExt;

fn app_with(config: ServiceConfig) -> Router {
    let model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    router(model, &config)
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn ok<T: DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn error(app: &Router, method: &str, uri: &str, body: Option<Value>) -> ErrorBody {
    let (status, bytes) = call(app, method, uri, body).await;
    let err: ErrorBody = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(err.code, status.as_u16());
    err
}

fn image(b64: &str) -> Array3<f32> {
    decode_png(&STANDARD.decode(b64).unwrap()).unwrap()
}

const EDIT: &str = "remove the object at the top left";

async fn create(app: &Router, seed: u64) -> CreateResponse {
    ok(app, "POST", "/api/session", Some(json!({ "random_scene": seed }))).await
}

#[tokio::test]
async fn random_scenes_are_reproducible() {
    let app = app();
    let a = create(&app, 7).await;
    let b = create(&app, 7).await;
    assert_ne!(a.id, b.id);
    assert_eq!(image(&a.image_b64), image(&b.image_b64));
    assert_eq!(a.step, 0);
}

#[tokio::test]
async fn png_sessions_round_trip_and_check_size() {
    let app = app();
    let img = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| ((c * 50 + y * 3 + x) % 256) as f32 / 255.0);
    let b64 = STANDARD.encode(encode_png(&img).unwrap());
    let created: CreateResponse = ok(&app, "POST", "/api/session", Some(json!({ "png": b64 }))).await;
    assert_eq!(image(&created.image_b64), img);

    let small = STANDARD.encode(encode_png(&Array3::zeros((3, 32, 32))).unwrap());
    assert_eq!(error(&app, "POST", "/api/session", Some(json!({ "png": small }))).await.code, 400);
    assert_eq!(error(&app, "POST", "/api/session", Some(json!({ "png": "AAAA" }))).await.code, 400);
}

#[tokio::test]
async fn edit_response_carries_analysis_fields() {
    let app = app();
    let s = create(&app, 4).await;
    let resp: EditResponse = ok(&app, "POST", &format!("/api/session/{}/edit", s.id), Some(json!({ "instruction": EDIT }))).await;
    assert_eq!(resp.step, 1);
    assert_eq!(resp.instruction.as_deref(), Some(EDIT));
    let n = EDIT.split_whitespace().count();
    assert_eq!(resp.tokens.len(), n);
    for attn in [&resp.attn_where, &resp.attn_how] {
        assert_eq!(attn.len(), n);
        assert!((attn.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(resp.alpha.len(), 2);
    for row in &resp.alpha {
        assert_eq!(row.len(), 3);
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let mask = decode_png(&STANDARD.decode(resp.mask_b64.unwrap()).unwrap()).unwrap();
    assert_eq!(mask.dim(), (3, 64, 64));
    assert_eq!(image(&resp.image_b64).dim(), (3, 64, 64));
}

#[tokio::test]
async fn same_input_gives_same_response_across_sessions() {
    let app = app();
    let (a, b) = (create(&app, 9).await, create(&app, 9).await);
    let body = Some(json!({ "instruction": "add a small red square to the center" }));
    let ra: Value = ok(&app, "POST", &format!("/api/session/{}/edit", a.id), body.clone()).await;
    let rb: Value = ok(&app, "POST", &format!("/api/session/{}/edit", b.id), body).await;
    assert_eq!(ra, rb);
    // Sampling is accepted and keeps the response shape.
    let rs: EditResponse = ok(
        &app,
        "POST",
        &format!("/api/session/{}/edit?sample=true", a.id),
        Some(json!({ "instruction": EDIT })),
    )
    .await;
    assert_eq!(rs.step, 2);
}

#[tokio::test]
async fn undo_restores_previous_images_exactly() {
    let app = app();
    let s = create(&app, 11).await;
    let initial = image(&s.image_b64);
    let edit = format!("/api/session/{}/edit", s.id);
    let undo = format!("/api/session/{}/undo", s.id);

    ok::<EditResponse>(&app, "POST", &edit, Some(json!({ "instruction": EDIT }))).await;
    let back: EditResponse = ok(&app, "POST", &undo, None).await;
    assert_eq!(back.step, 0);
    assert_eq!(image(&back.image_b64), initial);
    assert!(back.mask_b64.is_none() && back.tokens.is_empty());

    let again: EditResponse = ok(&app, "POST", &undo, None).await;
    assert_eq!(again.step, 0);

    let first: EditResponse = ok(&app, "POST", &edit, Some(json!({ "instruction": EDIT }))).await;
    ok::<EditResponse>(&app, "POST", &edit, Some(json!({ "instruction": "add a large blue circle to the bottom right" }))).await;
    let back: EditResponse = ok(&app, "POST", &undo, None).await;
    assert_eq!(back.step, 1);
    assert_eq!(back, first);
    let history: HistoryResponse = ok(&app, "GET", &format!("/api/session/{}/history", s.id), None).await;
    assert_eq!(history.steps.len(), 2);
}

#[tokio::test]
async fn history_grows_in_step_order() {
    let app = app();
    let s = create(&app, 2).await;
    let uri = format!("/api/session/{}/history", s.id);
    let h: HistoryResponse = ok(&app, "GET", &uri, None).await;
    assert_eq!(h.steps.len(), 1);
    assert!(h.steps[0].instruction.is_none());
    for k in 0..3 {
        ok::<EditResponse>(&app, "POST", &format!("/api/session/{}/edit", s.id), Some(json!({ "instruction": EDIT }))).await;
        let h: HistoryResponse = ok(&app, "GET", &uri, None).await;
        assert_eq!(h.steps.len(), k + 2);
        assert!(h.steps.iter().enumerate().all(|(i, e)| e.step == i));
    }
}

#[tokio::test]
async fn sessions_are_isolated() {
    let app = app();
    let (a, b) = (create(&app, 5).await, create(&app, 5).await);
    ok::<EditResponse>(&app, "POST", &format!("/api/session/{}/edit", a.id), Some(json!({ "instruction": EDIT }))).await;
    let hb: HistoryResponse = ok(&app, "GET", &format!("/api/session/{}/history", b.id), None).await;
    assert_eq!(hb.steps.len(), 1);
}

#[tokio::test]
async fn error_codes() {
    let app = app_with(ServiceConfig {
        capacity: 1,
        max_body: 256,
        ..ServiceConfig::default()
    });
    assert_eq!(error(&app, "POST", "/api/session/nope/edit", Some(json!({ "instruction": EDIT }))).await.code, 404);
    assert_eq!(error(&app, "POST", "/api/session/nope/undo", None).await.code, 404);
    assert_eq!(error(&app, "GET", "/api/session/nope/history", None).await.code, 404);
    let s = create(&app, 1).await;
    let edit = format!("/api/session/{}/edit", s.id);
    assert_eq!(error(&app, "POST", &edit, Some(json!({ "instruction": "  " }))).await.code, 422);
    assert_eq!(error(&app, "POST", &edit, Some(json!({ "words": EDIT }))).await.code, 400);
    // Capacity of one is taken by the live session.
    assert_eq!(error(&app, "POST", "/api/session", Some(json!({ "random_scene": 2 }))).await.code, 413);
    let big = "x".repeat(1000);
    assert_eq!(error(&app, "POST", &edit, Some(json!({ "instruction": big }))).await.code, 413);
}

#[tokio::test]
async fn health_reports_model() {
    let app = app();
    let h: Value = ok(&app, "GET", "/api/health", None).await;
    assert_eq!(h["status"], "ok");
    assert_eq!(h["variant"], "full");
    assert_eq!(h["image_size"], 64);
}

#[tokio::test]
async fn static_files_are_served_outside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let app = app_with(ServiceConfig {
        static_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let (status, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>console</html>");
    let h: Value = ok(&app, "GET", "/api/health", None).await;
    assert_eq!(h["status"], "ok");
}
