use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cdmp_core::geometry::Vec3;
use cdmp_core::synth::minjerk_line;
use cdmp_service::{router, AppState, Store, ERROR_CODES};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(Arc::new(AppState { store: Store::in_memory(), budget_secs: 10.0 }))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
    call_with(app, method, uri, body, None).await
}

async fn call_with(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    if_match: Option<&str>,
) -> (StatusCode, Value, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(m) = if_match {
        req = req.header("if-match", m);
    }
    let body = body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty);
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let json = serde_json::from_str(&text).unwrap_or(Value::Null);
    (status, json, text)
}

fn assert_error(status: StatusCode, body: &Value, want_status: StatusCode, want_code: &str) {
    assert_eq!(status, want_status, "{body}");
    assert_eq!(body["code"], want_code);
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(ERROR_CODES.contains(&want_code));
}

/// Workspace `w` with a 1 m line demo, a sphere on the path and a hole object.
async fn seeded() -> Router {
    let app = app();
    let (s, b, _) = call(&app, Method::POST, "/workspaces", Some(json!({ "id": "w" }))).await;
    assert_eq!(s, StatusCode::CREATED, "{b}");
    assert_eq!(b["revision"], 1);
    let demo = minjerk_line("line", Vec3::ZERO, Vec3::X, 2.0, 0.01).unwrap();
    let (s, b, _) = call(&app, Method::PUT, "/workspaces/w/demonstrations/line", Some(serde_json::to_value(&demo).unwrap())).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    let sphere = json!({ "type": "sphere", "center": [0.5, 0.0, 0.0], "radius": 0.15, "margin": 0.02 });
    let (s, b, _) = call(&app, Method::PUT, "/workspaces/w/constraints/ball", Some(sphere)).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    let hole = json!({ "pose": { "rotation": [1.0, 0.0, 0.0, 0.0], "translation": [1.0, 0.0, 0.0] } });
    let (s, b, _) = call(&app, Method::PUT, "/workspaces/w/objects/hole", Some(hole)).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["revision"], 4);
    app
}

#[tokio::test]
async fn crud_and_revisions() {
    let app = seeded().await;
    let (s, ws, text) = call(&app, Method::GET, "/workspaces/w", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ws["schema_version"], 1);
    // reads do not bump the revision
    let (_, again, text2) = call(&app, Method::GET, "/workspaces/w", None).await;
    assert_eq!(text, text2);
    assert_eq!(ws, again);
    let (_, list, _) = call(&app, Method::GET, "/workspaces", None).await;
    assert_eq!(list["workspaces"][0]["revision"], 4);

    // stale write is refused and leaves state alone
    let moved = json!({ "pose": { "rotation": [1.0, 0.0, 0.0, 0.0], "translation": [2.0, 0.0, 0.0] } });
    let (s, b, _) = call_with(&app, Method::PUT, "/workspaces/w/objects/hole", Some(moved.clone()), Some("\"3\"")).await;
    assert_error(s, &b, StatusCode::CONFLICT, "conflict");
    let (_, after, text3) = call(&app, Method::GET, "/workspaces/w", None).await;
    assert_eq!(text, text3);
    assert_eq!(after["objects"]["hole"]["pose"]["translation"][0], 1.0);

    // fresh revision goes through
    let (s, b, _) = call(&app, Method::PUT, "/workspaces/w/objects/hole?revision=4", Some(moved)).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["revision"], 5);

    let (s, b, _) = call(&app, Method::POST, "/workspaces", Some(json!({ "id": "w" }))).await;
    assert_error(s, &b, StatusCode::CONFLICT, "conflict");

    // whole-workspace replace round trips
    let (s, b, _) = call(&app, Method::PUT, "/workspaces/w", Some(ws.clone())).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    let (_, back, _) = call(&app, Method::GET, "/workspaces/w", None).await;
    assert_eq!(back, ws);

    let (s, b, _) = call(&app, Method::DELETE, "/workspaces/w/constraints/ball", None).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    let (s, b, _) = call(&app, Method::GET, "/workspaces/w/constraints", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, json!([]));
}

#[tokio::test]
async fn invalid_inputs_map_to_codes() {
    let app = seeded().await;
    let bad_sphere = json!({ "type": "sphere", "center": [0.0, 0.0, 0.0], "radius": -1.0 });
    let (s, b, _) = call(&app, Method::PUT, "/workspaces/w/constraints/neg", Some(bad_sphere)).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "invalid_geometry");

    let req = Request::builder().method(Method::POST).uri("/workspaces/w/fit").body(Body::from("{not json")).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);

    let (s, b, _) = call(&app, Method::PUT, "/workspaces/w/keypoints/line", Some(json!([{ "time": 5.0 }]))).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "invalid_keypoint");

    let chain = json!({ "demo_id": "line", "segments": [{ "frame": { "object": "ghost" } }] });
    let (s, b, _) = call(&app, Method::POST, "/workspaces/w/solve", Some(chain)).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "dangling_reference");
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let app = seeded().await;
    for (m, uri, body) in [
        (Method::GET, "/workspaces/nope", None),
        (Method::GET, "/workspaces/w/demonstrations/nope", None),
        (Method::GET, "/workspaces/w/widgets", None),
        (Method::POST, "/workspaces/w/fit", Some(json!({ "demo_id": "nope" }))),
        (Method::POST, "/workspaces/w/rollout", Some(json!({ "chain_id": "nope" }))),
        (Method::GET, "/workspaces/w/export/nope.csv", None),
        (Method::DELETE, "/workspaces/w/objects/nope", None),
    ] {
        let (s, b, _) = call(&app, m, uri, body).await;
        assert_error(s, &b, StatusCode::NOT_FOUND, "not_found");
        assert!(b["details"]["id"].is_string(), "{uri}: {b}");
    }
}

#[tokio::test]
async fn fit_reproduces_demo() {
    let app = seeded().await;
    let (s, b, _) = call(&app, Method::POST, "/workspaces/w/fit", Some(json!({ "demo_id": "line", "n_basis": 30 }))).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert!(b["rmse"].as_f64().unwrap() < 0.02);
    let (_, ws, _) = call(&app, Method::GET, "/workspaces", None).await;
    assert_eq!(ws["workspaces"][0]["revision"], 4);
}

#[tokio::test]
async fn solve_then_what_if_and_export() {
    let app = seeded().await;
    let body = json!({ "demo_id": "line", "segments": [{ "frame": { "object": "hole" } }] });
    let (s, b, _) = call(&app, Method::POST, "/workspaces/w/solve", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["revision"], 5);
    assert_eq!(b["result"]["converged"], true);

    let base = json!({ "chain_id": "line" });
    let (s, r0, _) = call(&app, Method::POST, "/workspaces/w/rollout", Some(base)).await;
    assert_eq!(s, StatusCode::OK, "{r0}");
    let moved = json!({
        "chain_id": "line",
        "object_poses": { "hole": { "rotation": [1.0, 0.0, 0.0, 0.0], "translation": [1.0, 0.1, 0.0] } }
    });
    let (s, r1, _) = call(&app, Method::POST, "/workspaces/w/rollout", Some(moved)).await;
    assert_eq!(s, StatusCode::OK, "{r1}");
    let end = |r: &Value| {
        let last = r["rollout"].as_array().unwrap().last().unwrap().clone();
        last["position"][1].as_f64().unwrap()
    };
    assert!((end(&r1) - end(&r0) - 0.1).abs() < 1e-3);
    // what-if does not touch the stored workspace
    let (_, list, _) = call(&app, Method::GET, "/workspaces", None).await;
    assert_eq!(list["workspaces"][0]["revision"], 5);

    let (s, v, _) = call(&app, Method::POST, "/workspaces/w/verify", Some(json!({ "chain_id": "line", "fine_dt": 0.001 }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["ok"], true);

    let req = Request::builder().uri("/workspaces/w/export/line.csv").body(Body::empty()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "text/csv");
    let csv = String::from_utf8(res.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
    assert_eq!(csv.lines().count(), r0["rollout"].as_array().unwrap().len() + 1);
    assert!(csv.starts_with(cdmp_core::export::CSV_HEADER));

    let (s, b, _) = call(&app, Method::GET, "/workspaces/w/export/line.txt", None).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "bad_request");
}

#[tokio::test]
async fn goal_inside_obstacle_is_422() {
    let app = seeded().await;
    let at_goal = json!({ "type": "sphere", "center": [1.0, 0.0, 0.0], "radius": 0.05 });
    let (s, _, _) = call(&app, Method::PUT, "/workspaces/w/constraints/at_goal", Some(at_goal)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, b, _) = call(&app, Method::POST, "/workspaces/w/solve", Some(json!({ "demo_id": "line" }))).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "degenerate_problem");
}

#[tokio::test]
async fn referenced_object_needs_cascade() {
    let app = seeded().await;
    let body = json!({ "demo_id": "line", "segments": [{ "frame": { "object": "hole" } }] });
    let (s, _, _) = call(&app, Method::POST, "/workspaces/w/solve", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, b, _) = call(&app, Method::DELETE, "/workspaces/w/objects/hole", None).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "referenced");
    assert_eq!(b["details"]["dependents"], json!(["chain:line"]));
    let (s, b, _) = call(&app, Method::DELETE, "/workspaces/w/objects/hole?cascade=true", None).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["removed"], json!(["chain:line"]));
}

#[tokio::test]
async fn data_dir_persists_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cdmp_service::Config {
        listen: "127.0.0.1:0".parse().unwrap(),
        budget_secs: 5.0,
        data_dir: Some(dir.path().to_path_buf()),
    };
    let app = router(cdmp_service::state(&cfg).unwrap());
    let (s, _, _) = call(&app, Method::POST, "/workspaces", Some(json!({ "id": "kept" }))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, before, _) = call(&app, Method::GET, "/workspaces/kept", None).await;
    assert!(dir.path().join("kept.cdmpws.json").exists());

    let app = router(cdmp_service::state(&cfg).unwrap());
    let (s, after, _) = call(&app, Method::GET, "/workspaces/kept", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(before, after);
    let (s, b, _) = call(&app, Method::POST, "/workspaces", Some(json!({ "id": "../x" }))).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "bad_request");
}
