mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::{cli, fixture, s};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use splatlens::densifier::DensifierModel;
use splatlens::io;
use splatlens::roi::RoISpec;
use splatlens::synth::SyntheticScene;
use splatlens::Rect;
use splatlens_service::http::{router, AppState};
use splatlens_service::ops::LoadedScene;
use tower::ServiceExt;

fn app() -> Router {
    let f = fixture();
    let scene = LoadedScene::load(&f.scene).unwrap();
    let model = DensifierModel::load(&f.model).unwrap();
    router(AppState::new(scene, model).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (st, bytes) = call(app, method, uri, body).await;
    (st, serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&bytes))))
}

/// The stored RoI crop of view 0 in low-res pixels.
fn roi_rect() -> Rect {
    let scene = SyntheticScene::load(&fixture().scene).unwrap();
    let r = scene.roi.crops[0].unwrap();
    let k = scene.cameras[0].width / scene.low_res_cameras[0].width;
    Rect {
        x0: r.x0 / k,
        y0: r.y0 / k,
        w: r.w / k,
        h: r.h / k,
    }
}

async fn post_roi(app: &Router, seed: u64) -> Value {
    let (st, v) = call_json(app, "POST", "/roi", Some(json!({ "view_id": 0, "rect": roi_rect(), "seed": seed }))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v
}

async fn wait_result(app: &Router, job: u64) -> Vec<u8> {
    for _ in 0..600 {
        let (st, bytes) = call(app, "GET", &format!("/result/{job}"), None).await;
        match st {
            StatusCode::OK => return bytes,
            StatusCode::ACCEPTED => tokio::time::sleep(Duration::from_millis(50)).await,
            other => panic!("{other}: {}", String::from_utf8_lossy(&bytes)),
        }
    }
    panic!("job {job} did not finish");
}

async fn densify(app: &Router, roi_id: u64) -> (u64, Vec<u8>) {
    let (st, v) = call_json(app, "POST", "/densify", Some(json!({ "roi_id": roi_id }))).await;
    assert_eq!(st, StatusCode::ACCEPTED);
    let job = v["job_id"].as_u64().unwrap();
    (job, wait_result(app, job).await)
}

#[tokio::test]
async fn views_list_cameras_and_previews() {
    let app = app();
    let scene = SyntheticScene::load(&fixture().scene).unwrap();
    let (st, v) = call_json(&app, "GET", "/views", None).await;
    assert_eq!(st, StatusCode::OK);
    let views = v["views"].as_array().unwrap();
    assert_eq!(views.len(), scene.cameras.len());
    assert_eq!(v["num_gaussians"], scene.g_input.len());
    for (i, view) in views.iter().enumerate() {
        assert_eq!(view["camera"], serde_json::to_value(scene.low_res_cameras[i]).unwrap());
        assert_eq!(view["high_res_camera"], serde_json::to_value(scene.cameras[i]).unwrap());
        let (st, png) = call(&app, "GET", view["image"].as_str().unwrap(), None).await;
        assert_eq!(st, StatusCode::OK);
        let img = io::decode_rgb(&png).unwrap();
        assert_eq!((img.width, img.height), (scene.low_res_cameras[i].width, scene.low_res_cameras[i].height));
        let expect = splatlens_service::ops::render_image(&scene.g_input, &scene.low_res_cameras[i]).unwrap();
        assert_eq!(png, io::encode_png(&expect).unwrap());
    }
    assert_eq!(views[0]["role"], "context");
    assert_eq!(views[4]["role"], "target");
    let (st, _) = call(&app, "GET", "/views/99/image.png", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_roi_requests_are_structured_errors() {
    let app = app();
    let w = SyntheticScene::load(&fixture().scene).unwrap().low_res_cameras[0].width;
    let cases = [
        json!({ "view_id": 0, "rect": { "x0": w - 2, "y0": 0, "w": 4, "h": 4 } }),
        json!({ "view_id": 0, "rect": { "x0": 0, "y0": 0, "w": 0, "h": 4 } }),
        json!({ "view_id": 0, "rect": { "x0": usize::MAX, "y0": 0, "w": 4, "h": 4 } }),
        json!({ "view_id": 9, "rect": { "x0": 0, "y0": 0, "w": 4, "h": 4 } }),
        json!({ "view_id": 0, "rect": { "x0": -1, "y0": 0, "w": 4, "h": 4 } }),
        json!({ "view_id": 0 }),
    ];
    for body in cases {
        let (st, v) = call_json(&app, "POST", "/roi", Some(body.clone())).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(v["error"]["code"], "invalid_request", "{body}");
        assert!(!v["error"]["message"].as_str().unwrap().is_empty());
    }
    let req = Request::builder().method("POST").uri("/roi").body(Body::from("{not json")).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let (st, v) = call_json(&app, "POST", "/densify", Some(json!({ "roi_id": 12345 }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");
    let (st, _) = call_json(&app, "GET", "/result/777", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call_json(&app, "GET", "/nowhere", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn roi_echoes_rect_and_serves_mask_previews() {
    let app = app();
    let v = post_roi(&app, 3).await;
    assert_eq!(v["rect"], serde_json::to_value(roi_rect()).unwrap());
    assert_eq!(v["view_id"], 0);
    let masks = v["masks"].as_array().unwrap();
    assert_eq!(masks.len(), 5);
    assert!(masks[0]["pixels"].as_u64().unwrap() > 0);
    for m in masks {
        let (st, png) = call(&app, "GET", m["preview"].as_str().unwrap(), None).await;
        assert_eq!(st, StatusCode::OK);
        let img = image_mask(&png);
        assert_eq!((img.width as u64, img.height as u64), (m["width"].as_u64().unwrap(), m["height"].as_u64().unwrap()));
        assert_eq!(img.count() as u64, m["pixels"].as_u64().unwrap());
    }
    let id = v["roi_id"].as_u64().unwrap();
    let (st, _) = call(&app, "GET", &format!("/roi/{id}/mask/9.png"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

fn image_mask(png: &[u8]) -> splatlens::Mask {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    std::fs::write(&p, png).unwrap();
    io::load_mask_png(&p).unwrap()
}

/// Rebuilds the RoI from the HTTP response alone: mask previews and crops.
async fn roi_from_http(app: &Router, v: &Value) -> RoISpec {
    let mut masks = Vec::new();
    let mut crops = Vec::new();
    for m in v["masks"].as_array().unwrap() {
        let (_, png) = call(app, "GET", m["preview"].as_str().unwrap(), None).await;
        masks.push(image_mask(&png));
        crops.push(serde_json::from_value(m["crop"].clone()).unwrap());
    }
    RoISpec {
        masks,
        crops,
        seed: v["seed"].as_u64().unwrap(),
    }
}

#[tokio::test]
async fn result_metrics_match_cli_eval_and_densify() {
    let f = fixture();
    let app = app();
    let v = post_roi(&app, 11).await;
    let (job, payload) = densify(&app, v["roi_id"].as_u64().unwrap()).await;
    let result: Value = serde_json::from_slice(&payload).unwrap();
    assert_eq!(result["state"], "done");
    assert_eq!(result["status"], "densified");
    assert_eq!(result["background_identical"], true);
    assert_eq!(result["rect"], v["rect"]);

    let dir = tempfile::tempdir().unwrap();
    let (st, gs) = call(&app, "GET", &format!("/gaussians/{job}"), None).await;
    assert_eq!(st, StatusCode::OK);
    let gs_path = dir.path().join("final.gs");
    std::fs::write(&gs_path, &gs).unwrap();
    let roi_dir = dir.path().join("roi");
    roi_from_http(&app, &v).await.save(&roi_dir).unwrap();

    let after = cli(&["eval", "--scene", &s(&f.scene), "--gaussians", &s(&gs_path), "--roi", &s(&roi_dir)]);
    assert_eq!(after, result["metrics"]["densified"]);
    let before = cli(&["eval", "--scene", &s(&f.scene), "--gaussians", &s(&f.scene.join("input.gs")), "--roi", &s(&roi_dir)]);
    assert_eq!(before, result["metrics"]["input"]);
    assert!(after["masked_psnr"].is_f64() && after["num_gaussians"].as_u64() == result["counts"]["final"].as_u64());

    let cli_out = dir.path().join("cli.gs");
    let report = cli(&[
        "densify",
        "--scene",
        &s(&f.scene),
        "--model",
        &s(&f.model),
        "--roi",
        &s(&roi_dir),
        "--out",
        &s(&cli_out),
    ]);
    assert_eq!(std::fs::read(&cli_out).unwrap(), gs);
    for key in ["status", "counts", "background_identical", "metrics"] {
        assert_eq!(report[key], result[key], "{key}");
    }

    // before/after renders are the input and the downloaded set
    let scene = SyntheticScene::load(&f.scene).unwrap();
    let fin = io::read_gaussian_set(&gs[..]).unwrap();
    for view in [0, 3] {
        let cam = scene.cameras[view];
        let (_, png) = call(&app, "GET", &format!("/result/{job}/after/{view}.png"), None).await;
        assert_eq!(png, io::encode_png(&splatlens_service::ops::render_image(&fin, &cam).unwrap()).unwrap());
        let (_, png) = call(&app, "GET", &format!("/result/{job}/before/{view}.png"), None).await;
        assert_eq!(png, io::encode_png(&splatlens_service::ops::render_image(&scene.g_input, &cam).unwrap()).unwrap());
    }
    let (st, _) = call(&app, "GET", &format!("/result/{job}/sideways/0.png"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn identical_requests_give_identical_payloads() {
    let app = app();
    let a = post_roi(&app, 5).await;
    let b = post_roi(&app, 5).await;
    assert_ne!(a["roi_id"], b["roi_id"]);
    assert_eq!(a["masks"].as_array().unwrap().len(), b["masks"].as_array().unwrap().len());
    let id_a = a["roi_id"].as_u64().unwrap();
    let id_b = b["roi_id"].as_u64().unwrap();
    // queue both before waiting on either
    let (_, ja) = call_json(&app, "POST", "/densify", Some(json!({ "roi_id": id_a }))).await;
    let (_, jb) = call_json(&app, "POST", "/densify", Some(json!({ "roi_id": id_b }))).await;
    let (ja, jb) = (ja["job_id"].as_u64().unwrap(), jb["job_id"].as_u64().unwrap());
    let pa = wait_result(&app, ja).await;
    let pb = wait_result(&app, jb).await;
    assert_eq!(pa, pb);
    let (_, ga) = call(&app, "GET", &format!("/gaussians/{ja}"), None).await;
    let (_, gb) = call(&app, "GET", &format!("/gaussians/{jb}"), None).await;
    assert_eq!(ga, gb);
}

#[tokio::test]
async fn concurrent_reads_while_densifying() {
    let app = app();
    let v = post_roi(&app, 2).await;
    let (_, j) = call_json(&app, "POST", "/densify", Some(json!({ "roi_id": v["roi_id"] }))).await;
    let reads: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, "GET", "/views", None).await.0 })
        })
        .collect();
    for r in reads {
        assert_eq!(r.await.unwrap(), StatusCode::OK);
    }
    wait_result(&app, j["job_id"].as_u64().unwrap()).await;
}

#[tokio::test]
async fn posting_a_scene_replaces_it_and_drops_old_rois() {
    let f = fixture();
    let app = app();
    let v = post_roi(&app, 1).await;
    let (st, views) = call_json(&app, "POST", "/scene", Some(json!({ "path": s(&f.scene) }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(views["views"].as_array().unwrap().len(), 5);
    let (st, _) = call_json(&app, "POST", "/densify", Some(json!({ "roi_id": v["roi_id"] }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, v) = call_json(&app, "POST", "/scene", Some(json!({ "path": "/no/such/scene" }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");
}

#[test]
fn app_state_is_shareable() {
    fn check<T: Send + Sync>() {}
    check::<Arc<AppState>>();
}
