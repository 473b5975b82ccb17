//! Drive the HTTP API in-process: list views, draw a RoI, densify, fetch the result.

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use splatlens::densifier::{DensifierModel, ModelConfig};
use splatlens::synth::{generate_scene, SynthConfig};
use splatlens_service::http::{router, AppState};
use splatlens_service::ops::LoadedScene;
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let bytes = app.clone().oneshot(req).await.unwrap().into_body().collect().await.unwrap().to_bytes();
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::main]
async fn main() {
    let scene = generate_scene(2, &SynthConfig::default()).unwrap();
    let model = DensifierModel::new(ModelConfig::default()).unwrap();
    let app = router(AppState::new(LoadedScene::from_synthetic(&scene).unwrap(), model).unwrap());

    let views = call(&app, "GET", "/views", None).await;
    println!("{} views", views["views"].as_array().unwrap().len());
    let r = scene.roi.crops[0].unwrap();
    let k = scene.cameras[0].width / scene.low_res_cameras[0].width;
    let rect = json!({ "x0": r.x0 / k, "y0": r.y0 / k, "w": r.w / k, "h": r.h / k });
    let roi = call(&app, "POST", "/roi", Some(json!({ "view_id": 0, "rect": rect, "seed": 1 }))).await;
    println!("roi {} with {} masks", roi["roi_id"], roi["masks"].as_array().unwrap().len());
    let job = call(&app, "POST", "/densify", Some(json!({ "roi_id": roi["roi_id"] }))).await;
    loop {
        let res = call(&app, "GET", &format!("/result/{}", job["job_id"]), None).await;
        if res["state"] == "done" {
            println!("{}", serde_json::to_string_pretty(&res["metrics"]).unwrap());
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    }
}
