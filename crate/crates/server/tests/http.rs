use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use shapematch::imageio::{decode_image, encode_png};
use shapematch::pipeline::train_style;
use shapematch::{toy, GridTag};
use shapematch_server::{router, AppState, MAX_BODY_BYTES};
use tower::ServiceExt;

fn make_bundle(styles: &Path, name: &str) {
    let cfg = toy::smoke_config(styles.join(".sketch.smg1"), styles, 1);
    let mut style = toy::circle_style(0.0).unwrap();
    style.name = name.to_string();
    let data = toy::text_dataset(2, 1).unwrap();
    train_style(&style, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
}

fn text_png() -> String {
    let data = toy::text_dataset(1, 9).unwrap();
    B64.encode(encode_png(data.get(0)).unwrap())
}

async fn call(dir: &Path, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(AppState::new(dir)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(v: &Value) -> Request<Body> {
    Request::post("/api/render")
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

#[tokio::test]
async fn empty_catalog_and_health() {
    let dir = tempfile::tempdir().unwrap();
    let (s, v) = call(dir.path(), get("/api/styles")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({ "styles": [] }));
    let (s, v) = call(dir.path(), get("/health")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({ "status": "ok", "loaded_styles": 0 }));
}

#[tokio::test]
async fn catalog_lists_bundles_and_warns_on_broken_ones() {
    let dir = tempfile::tempdir().unwrap();
    make_bundle(dir.path(), "alpha");
    make_bundle(dir.path(), "beta");
    std::fs::create_dir(dir.path().join("broken")).unwrap();
    let (s, v) = call(dir.path(), get("/api/styles")).await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = v["styles"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["alpha", "beta"]);
    assert_eq!(v["styles"][0]["gly_weight"], json!(0.0));
    assert_eq!(v["warnings"].as_array().unwrap().len(), 1);

    let (_, h) = call(dir.path(), get("/health")).await;
    assert_eq!(h["loaded_styles"], json!(2));
    make_bundle(dir.path(), "gamma");
    let (_, h) = call(dir.path(), get("/health")).await;
    assert_eq!(h["loaded_styles"], json!(3));
}

#[tokio::test]
async fn render_contract() {
    let dir = tempfile::tempdir().unwrap();
    make_bundle(dir.path(), "alpha");
    make_bundle(dir.path(), "beta");
    let img = text_png();
    let ok = json!({ "style": "alpha", "l": 0.5, "seed": 4, "image_b64": img });

    let (s, v) = call(dir.path(), post_json(&ok)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let png = B64.decode(v["image_b64"].as_str().unwrap()).unwrap();
    let out = decode_image(&png, GridTag::Style, false).unwrap();
    assert_eq!((out.height(), out.width()), (toy::TOY_SIZE, toy::TOY_SIZE));
    assert!(v["timing_ms"].as_f64().unwrap() >= 0.0);

    let (_, again) = call(dir.path(), post_json(&ok)).await;
    assert_eq!(again["image_b64"], v["image_b64"]);

    let mash = json!({ "l": 0.2, "image_b64": img, "glyph_style": "alpha", "texture_style": "beta" });
    assert_eq!(call(dir.path(), post_json(&mash)).await.0, StatusCode::OK);

    let cases = [
        (json!({ "style": "alpha", "l": 1.5, "image_b64": img }), StatusCode::BAD_REQUEST),
        (json!({ "style": "alpha", "l": -0.1, "image_b64": img }), StatusCode::BAD_REQUEST),
        (json!({ "l": 0.5, "image_b64": img }), StatusCode::BAD_REQUEST),
        (json!({ "style": "alpha", "l": 0.5, "image_b64": "%%%" }), StatusCode::BAD_REQUEST),
        (json!({ "style": "missing", "l": 0.5, "image_b64": img }), StatusCode::NOT_FOUND),
        (json!({ "style": "../alpha", "l": 0.5, "image_b64": img }), StatusCode::NOT_FOUND),
        (
            json!({ "style": "alpha", "l": 0.5, "image_b64": B64.encode(b"not a png") }),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
    ];
    for (body, want) in cases {
        let (s, v) = call(dir.path(), post_json(&body)).await;
        assert_eq!(s, want, "{body} -> {v}");
        assert!(v["error"].is_string());
    }

    let odd = shapematch::ImageGrid::filled(GridTag::Text, 30, 30, -1.0).unwrap();
    let body = json!({ "style": "alpha", "l": 0.5, "image_b64": B64.encode(encode_png(&odd).unwrap()) });
    assert_eq!(call(dir.path(), post_json(&body)).await.0, StatusCode::BAD_REQUEST);

    let bad = Request::post("/api/render")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(call(dir.path(), bad).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let big = "A".repeat(MAX_BODY_BYTES + 1);
    let body = json!({ "style": "alpha", "l": 0.5, "image_b64": big });
    let (s, _) = call(dir.path(), post_json(&body)).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn cors_headers_present() {
    let dir = tempfile::tempdir().unwrap();
    let req = Request::get("/health").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = router(AppState::new(dir.path())).oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
