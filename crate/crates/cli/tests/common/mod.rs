#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cdmp_service::{router, AppState, Store};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const PEG_DURATION: &str = "3.0";

/// Run the CLI in process: (exit code, stdout, stderr).
pub fn cdmp(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("cdmp").chain(args.iter().copied());
    let code = cdmp_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn ok(args: &[&str]) -> String {
    let (code, out, err) = cdmp(args);
    assert_eq!(code, 0, "cdmp {}: {err}", args.join(" "));
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 1 m line demo through a 0.15 m obstacle (sphere or box) with 0.02 m margin.
pub fn line_workspace(dir: &Path, obstacle: &str) -> PathBuf {
    let ws = dir.join(format!("line-{obstacle}.cdmpws.json"));
    let demo = dir.join("line.json");
    ok(&["demo-synth", "--kind", "minjerk-line", "--duration", "2", "--id", "line", "--out", s(&demo)]);
    ok(&["init", "--workspace", s(&ws)]);
    ok(&["add-demo", "--workspace", s(&ws), "--file", s(&demo)]);
    match obstacle {
        "sphere" => ok(&[
            "add-sphere", "--workspace", s(&ws), "--id", "ball", "--center", "0.5", "0", "0", "--radius", "0.15",
            "--margin", "0.02",
        ]),
        "box" => ok(&[
            "add-box", "--workspace", s(&ws), "--id", "crate", "--center", "0.5", "0", "0", "--half-extents", "0.15",
            "0.15", "0.15", "--margin", "0.02",
        ]),
        "none" => String::new(),
        other => panic!("unknown obstacle {other}"),
    };
    ws
}

/// Peg insertion demo with the hole object at its teach pose and one keypoint
/// where the approach turns into the descent.
pub fn peg_workspace(dir: &Path) -> PathBuf {
    let ws = dir.join("peg.cdmpws.json");
    let demo = dir.join("peg.json");
    ok(&["demo-synth", "--kind", "peg-insert", "--duration", PEG_DURATION, "--id", "peg", "--out", s(&demo)]);
    ok(&["init", "--workspace", s(&ws)]);
    ok(&["add-demo", "--workspace", s(&ws), "--file", s(&demo)]);
    let hole = cdmp_core::synth::peg_hole_pose().translation;
    let (x, y, z) = (hole.x.to_string(), hole.y.to_string(), hole.z.to_string());
    ok(&["add-object", "--workspace", s(&ws), "--id", "hole", "--position", &x, &y, &z]);
    let t = cdmp_core::synth::peg_keypoint_time(PEG_DURATION.parse().unwrap()).to_string();
    ok(&["add-keypoint", "--workspace", s(&ws), "--demo", "peg", "--time", &t, "--label", "above"]);
    ws
}

pub fn solve_peg(ws: &Path) -> String {
    ok(&["solve", "--workspace", s(ws), "--demo", "peg", "--segment-keypoints", "--frames", "world,object:hole"])
}

pub fn service() -> Router {
    router(Arc::new(AppState { store: Store::in_memory(), budget_secs: 10.0 }))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

/// Drop every `wall_time` entry; the only field allowed to differ between runs.
pub fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_time");
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

pub fn untimed(bytes: &[u8]) -> String {
    let mut v: Value = serde_json::from_slice(bytes).unwrap();
    strip_timing(&mut v);
    cdmp_core::export::to_canonical_string(&v).unwrap()
}

/// Last CSV row's position columns.
pub fn csv_endpoint(csv: &str) -> [f64; 3] {
    let last = csv.lines().last().unwrap();
    let cols: Vec<f64> = last.split(',').skip(1).take(3).map(|c| c.parse().unwrap()).collect();
    [cols[0], cols[1], cols[2]]
}
