//! HTTP front end for the constrained DMP engine.
//!
//! Workspaces live in a [`Store`] keyed by id, each with a revision counter.
//! Reads never change the revision; every committed mutation bumps it by one.
//! Writers may pass the revision they last saw (`If-Match` header or
//! `?revision=`) and get `409 conflict` if someone else got there first.

pub mod error;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use cdmp_core::dmp::{DemoSample, Demonstration};
use cdmp_core::export::to_canonical_vec;
use cdmp_core::geometry::{ConstraintRegion, FrameRef, Pose, Shape, Vec3};
use cdmp_core::pipeline::{self, FitRequest, RolloutRequest, SolveRequest};
use cdmp_core::skills::{Keypoint, SceneObject};
use cdmp_core::workspace::{mutate, validate_keypoints, Command, Target, Workspace};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use error::{ApiError, ERROR_CODES};
pub use store::{Snapshot, Store};

/// Server settings, shared by the `cdmp-service` binary and `cdmp serve`.
#[derive(Debug, Clone, clap::Args)]
pub struct Config {
    /// Address to listen on.
    #[arg(long, env = "CDMP_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Upper bound on solver wall time per request, in seconds.
    #[arg(long, env = "CDMP_BUDGET_SECS", default_value_t = 10.0)]
    pub budget_secs: f64,
    /// Directory of `*.cdmpws.json` files to load at startup and write through to.
    #[arg(long, env = "CDMP_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct AppState {
    pub store: Store,
    pub budget_secs: f64,
}

type Shared = State<Arc<AppState>>;
type ApiResult = Result<Response, ApiError>;
type Edit = Box<dyn FnOnce(&mut Workspace) -> Result<(), ApiError> + Send>;

/// JSON body written with the canonical formatter, so responses carry the
/// same bytes the CLI prints.
pub fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    match to_canonical_vec(value) {
        Ok(bytes) => {
            let mut res = Response::new(Body::from(bytes));
            *res.status_mut() = status;
            res.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
            res
        }
        Err(e) => {
            let body = format!("{{\"code\":\"internal\",\"message\":{}}}", json!(e.to_string()));
            let mut res = Response::new(Body::from(body));
            *res.status_mut() = StatusCode::INTERNAL_SERVER_ERROR;
            res.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
            res
        }
    }
}

fn with_etag(mut res: Response, revision: u64) -> Response {
    if let Ok(v) = HeaderValue::from_str(&format!("\"{revision}\"")) {
        res.headers_mut().insert(header::ETAG, v);
    }
    res
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Revision the client expects, from `If-Match` or `?revision=`.
fn expected_revision(headers: &HeaderMap, query: &HashMap<String, String>) -> Result<Option<u64>, ApiError> {
    let raw = match headers.get(header::IF_MATCH) {
        Some(v) => Some(v.to_str().map_err(|_| ApiError::bad_request("If-Match is not ASCII"))?.to_string()),
        None => query.get("revision").cloned(),
    };
    let Some(raw) = raw else { return Ok(None) };
    let trimmed = raw.trim().trim_start_matches("W/").trim_matches('"');
    if trimmed == "*" {
        return Ok(None);
    }
    trimmed
        .parse()
        .map(Some)
        .map_err(|_| ApiError::bad_request(format!("revision `{raw}` is not a non-negative integer")))
}

fn flag(query: &HashMap<String, String>, name: &str) -> Result<bool, ApiError> {
    match query.get(name).map(String::as_str) {
        None | Some("false") | Some("0") => Ok(false),
        Some("true") | Some("1") | Some("") => Ok(true),
        Some(other) => Err(ApiError::bad_request(format!("`{name}` must be true or false, got `{other}`"))),
    }
}

#[derive(Serialize)]
struct Committed {
    id: String,
    revision: u64,
    removed: Vec<String>,
}

fn committed(snap: &Snapshot, removed: Vec<String>) -> Response {
    let body = Committed { id: snap.workspace.id.clone(), revision: snap.revision, removed };
    with_etag(json_response(StatusCode::OK, &body), snap.revision)
}

// Bodies are read loosely, then built through the validating constructors, so
// a well-formed but invalid value is a domain error (422) rather than a 400.

#[derive(Deserialize)]
struct DemoBody {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    frame: FrameRef,
    samples: Vec<DemoSample>,
}

impl DemoBody {
    fn build(self, path_id: Option<&str>) -> Result<Demonstration, ApiError> {
        let id = resolve_id(self.id, path_id, "demonstration")?;
        Demonstration::new(id, self.frame, self.samples).map_err(|e| ApiError::new(e.code(), e.to_string()))
    }
}

#[derive(Deserialize)]
struct ConstraintBody {
    #[serde(default)]
    id: Option<String>,
    #[serde(flatten)]
    shape: Shape,
    #[serde(default)]
    margin: f64,
}

impl ConstraintBody {
    fn build(self, path_id: Option<&str>) -> Result<ConstraintRegion, ApiError> {
        let id = resolve_id(self.id, path_id, "constraint")?;
        ConstraintRegion::new(id, self.shape, self.margin).map_err(|e| ApiError::new(e.code(), e.to_string()))
    }
}

#[derive(Deserialize)]
struct ObjectBody {
    #[serde(default)]
    id: Option<String>,
    pose: Pose,
    #[serde(default)]
    display_extent: Option<Vec3>,
}

impl ObjectBody {
    fn build(self, path_id: Option<&str>) -> Result<SceneObject, ApiError> {
        let id = resolve_id(self.id, path_id, "object")?;
        if !self.pose.is_finite() {
            return Err(ApiError::new("invalid_geometry", format!("object `{id}` pose must be finite")));
        }
        let mut obj = SceneObject::new(id, self.pose);
        if let Some(e) = self.display_extent {
            obj.display_extent = e;
        }
        Ok(obj)
    }
}

fn resolve_id(body: Option<String>, path: Option<&str>, kind: &str) -> Result<String, ApiError> {
    match (body, path) {
        (Some(b), Some(p)) if b != p => Err(ApiError::bad_request(format!("{kind} id `{b}` does not match path `{p}`"))),
        (_, Some(p)) => Ok(p.to_string()),
        (Some(b), None) => Ok(b),
        (None, None) => Err(ApiError::bad_request(format!("{kind} id is required"))),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Collection {
    Demonstrations,
    Constraints,
    Objects,
    Keypoints,
}

impl Collection {
    fn parse(name: &str) -> Result<Self, ApiError> {
        Ok(match name {
            "demonstrations" => Collection::Demonstrations,
            "constraints" => Collection::Constraints,
            "objects" => Collection::Objects,
            "keypoints" => Collection::Keypoints,
            other => return Err(ApiError::not_found("collection", other)),
        })
    }

    fn kind(self) -> &'static str {
        match self {
            Collection::Demonstrations => "demonstration",
            Collection::Constraints => "constraint",
            Collection::Objects => "object",
            Collection::Keypoints => "keypoints",
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/workspaces", get(list_workspaces).post(create_workspace))
        .route("/workspaces/{id}", get(get_workspace).put(put_workspace))
        .route("/workspaces/{id}/fit", post(fit))
        .route("/workspaces/{id}/solve", post(solve))
        .route("/workspaces/{id}/rollout", post(rollout))
        .route("/workspaces/{id}/verify", post(verify))
        .route("/workspaces/{id}/export/{file}", get(export))
        .route("/workspaces/{id}/{coll}", get(get_collection).put(put_collection))
        .route("/workspaces/{id}/{coll}/{item}", get(get_item).put(put_item).delete(delete_item))
        .fallback(|| async { ApiError::new("not_found", "no such route") })
        .with_state(state)
}

async fn list_workspaces(State(st): Shared) -> ApiResult {
    let list: Vec<Value> = st.store.list().into_iter().map(|(id, rev)| json!({ "id": id, "revision": rev })).collect();
    Ok(json_response(StatusCode::OK, &json!({ "workspaces": list })))
}

/// Body is either a full workspace document or `{"id": ...}` (both optional).
async fn create_workspace(State(st): Shared, body: Bytes) -> ApiResult {
    let ws = if body.iter().all(u8::is_ascii_whitespace) {
        Workspace::new(st.store.generate_id())
    } else {
        let v: Value = parse(&body)?;
        if v.get("schema_version").is_some() {
            Workspace::from_slice(&body)?
        } else {
            match v.get("id") {
                None | Some(Value::Null) => Workspace::new(st.store.generate_id()),
                Some(Value::String(s)) => Workspace::new(s.clone()),
                Some(_) => return Err(ApiError::bad_request("`id` must be a string")),
            }
        }
    };
    let snap = st.store.create(ws)?;
    let body = json!({ "id": snap.workspace.id, "revision": snap.revision });
    Ok(with_etag(json_response(StatusCode::CREATED, &body), snap.revision))
}

async fn get_workspace(State(st): Shared, Path(id): Path<String>) -> ApiResult {
    let snap = st.store.get(&id)?;
    Ok(with_etag(json_response(StatusCode::OK, &*snap.workspace), snap.revision))
}

async fn put_workspace(
    State(st): Shared,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let expected = expected_revision(&headers, &q)?;
    let _: Value = parse(&body)?;
    let next = Workspace::from_slice(&body)?;
    let (snap, ()) = st.store.commit(&id, expected, move |_| Ok((next, ())))?;
    Ok(committed(&snap, Vec::new()))
}

async fn get_collection(State(st): Shared, Path((id, coll)): Path<(String, String)>) -> ApiResult {
    let coll = Collection::parse(&coll)?;
    let snap = st.store.get(&id)?;
    let ws = &*snap.workspace;
    let res = match coll {
        Collection::Demonstrations => json_response(StatusCode::OK, &ws.demonstrations),
        Collection::Constraints => json_response(StatusCode::OK, &ws.constraints),
        Collection::Objects => json_response(StatusCode::OK, &ws.objects),
        Collection::Keypoints => json_response(StatusCode::OK, &ws.keypoints),
    };
    Ok(with_etag(res, snap.revision))
}

/// Replace a whole collection. Demonstrations and objects take a map keyed by
/// id, constraints a list, keypoints a map from demo id to keypoint list.
async fn put_collection(
    State(st): Shared,
    Path((id, coll)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let coll = Collection::parse(&coll)?;
    let expected = expected_revision(&headers, &q)?;
    let apply: Edit = match coll {
        Collection::Demonstrations => {
            let raw: BTreeMap<String, DemoBody> = parse(&body)?;
            Box::new(move |ws| {
                let mut out = BTreeMap::new();
                for (k, d) in raw {
                    out.insert(k.clone(), d.build(Some(&k))?);
                }
                ws.demonstrations = out;
                Ok(())
            })
        }
        Collection::Constraints => {
            let raw: Vec<ConstraintBody> = parse(&body)?;
            Box::new(move |ws| {
                ws.constraints = raw.into_iter().map(|c| c.build(None)).collect::<Result<_, _>>()?;
                Ok(())
            })
        }
        Collection::Objects => {
            let raw: BTreeMap<String, ObjectBody> = parse(&body)?;
            Box::new(move |ws| {
                let mut out = BTreeMap::new();
                for (k, o) in raw {
                    out.insert(k.clone(), o.build(Some(&k))?);
                }
                ws.objects = out;
                Ok(())
            })
        }
        Collection::Keypoints => {
            let raw: BTreeMap<String, Vec<Keypoint>> = parse(&body)?;
            Box::new(move |ws| {
                ws.keypoints = raw;
                Ok(())
            })
        }
    };
    let (snap, ()) = st.store.commit(&id, expected, move |ws| {
        let mut next = ws.clone();
        apply(&mut next)?;
        next.validate()?;
        for (demo_id, kps) in &next.keypoints {
            if let Some(d) = next.demonstrations.get(demo_id) {
                validate_keypoints(d, kps)?;
            }
        }
        Ok((next, ()))
    })?;
    Ok(committed(&snap, Vec::new()))
}

async fn get_item(State(st): Shared, Path((id, coll, item)): Path<(String, String, String)>) -> ApiResult {
    let coll = Collection::parse(&coll)?;
    let snap = st.store.get(&id)?;
    let ws = &*snap.workspace;
    let missing = || ApiError::not_found(coll.kind(), &item);
    let res = match coll {
        Collection::Demonstrations => json_response(StatusCode::OK, ws.demonstrations.get(&item).ok_or_else(missing)?),
        Collection::Constraints => json_response(StatusCode::OK, ws.constraint(&item).ok_or_else(missing)?),
        Collection::Objects => json_response(StatusCode::OK, ws.objects.get(&item).ok_or_else(missing)?),
        Collection::Keypoints => json_response(StatusCode::OK, ws.keypoints.get(&item).ok_or_else(missing)?),
    };
    Ok(with_etag(res, snap.revision))
}

/// Create or replace one item. Keypoints are addressed by demonstration id
/// and take the full list.
async fn put_item(
    State(st): Shared,
    Path((id, coll, item)): Path<(String, String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let coll = Collection::parse(&coll)?;
    let expected = expected_revision(&headers, &q)?;
    enum Item {
        Demo(DemoBody),
        Constraint(ConstraintBody),
        Object(ObjectBody),
        Keypoints(Vec<Keypoint>),
    }
    let parsed = match coll {
        Collection::Demonstrations => Item::Demo(parse(&body)?),
        Collection::Constraints => Item::Constraint(parse(&body)?),
        Collection::Objects => Item::Object(parse(&body)?),
        Collection::Keypoints => Item::Keypoints(parse(&body)?),
    };
    let (snap, removed) = st.store.commit(&id, expected, move |ws| {
        let cmd = match parsed {
            Item::Demo(d) => {
                let demonstration = d.build(Some(&item))?;
                if ws.demonstrations.contains_key(&item) {
                    Command::UpdateDemonstration { demonstration }
                } else {
                    Command::AddDemonstration { demonstration }
                }
            }
            Item::Constraint(c) => {
                let region = c.build(Some(&item))?;
                let (shape, margin) = (region.shape().clone(), region.margin());
                if ws.constraint(&item).is_some() {
                    Command::UpdateConstraint { id: item, shape, margin }
                } else {
                    Command::AddConstraint { id: item, shape, margin }
                }
            }
            Item::Object(o) => {
                let object = o.build(Some(&item))?;
                if ws.objects.contains_key(&item) {
                    Command::UpdateObject { object }
                } else {
                    Command::AddObject { object }
                }
            }
            Item::Keypoints(keypoints) => Command::SetKeypoints { demo_id: item, keypoints },
        };
        let m = mutate(ws, cmd)?;
        Ok((m.workspace, m.removed))
    })?;
    Ok(committed(&snap, removed))
}

async fn delete_item(
    State(st): Shared,
    Path((id, coll, item)): Path<(String, String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult {
    let coll = Collection::parse(&coll)?;
    let expected = expected_revision(&headers, &q)?;
    let cascade = flag(&q, "cascade")?;
    let cmd = match coll {
        Collection::Demonstrations => Command::Remove { target: Target::Demonstration(item), cascade },
        Collection::Constraints => Command::Remove { target: Target::Constraint(item), cascade },
        Collection::Objects => Command::Remove { target: Target::Object(item), cascade },
        Collection::Keypoints => Command::ClearKeypoints { demo_id: item },
    };
    let (snap, removed) = st.store.commit(&id, expected, move |ws| {
        let m = mutate(ws, cmd)?;
        Ok((m.workspace, m.removed))
    })?;
    Ok(committed(&snap, removed))
}

async fn fit(State(st): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: FitRequest = parse(&body)?;
    let snap = st.store.get(&id)?;
    let result = blocking(move || pipeline::fit(&snap.workspace, &req).map_err(ApiError::from)).await?;
    Ok(json_response(StatusCode::OK, &result))
}

/// Solve on a snapshot off the async runtime, then commit the new chain only
/// if nobody changed the workspace meanwhile.
async fn solve(
    State(st): Shared,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let mut req: SolveRequest = parse(&body)?;
    let snap = st.store.get(&id)?;
    if let Some(rev) = expected_revision(&headers, &q)? {
        if rev != snap.revision {
            return Err(ApiError::conflict(format!("revision {rev} is stale; workspace is at {}", snap.revision)));
        }
    }
    let mut opts = req.options.clone().unwrap_or_else(|| snap.workspace.default_params.solve.clone());
    opts.time_budget = opts.time_budget.min(st.budget_secs);
    req.options = Some(opts);
    let base = snap.workspace.clone();
    let (next, result) = blocking(move || pipeline::solve(&base, &req).map_err(ApiError::from)).await?;
    let (committed, ()) = st.store.commit(&id, Some(snap.revision), move |_| Ok((next, ())))?;
    let body = json!({ "revision": committed.revision, "result": result });
    Ok(with_etag(json_response(StatusCode::OK, &body), committed.revision))
}

async fn rollout(State(st): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: RolloutRequest = parse(&body)?;
    let snap = st.store.get(&id)?;
    let result = pipeline::rollout_what_if(&snap.workspace, &req)?;
    Ok(with_etag(json_response(StatusCode::OK, &result), snap.revision))
}

#[derive(Deserialize)]
struct VerifyRequest {
    chain_id: String,
    fine_dt: f64,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-4
}

async fn verify(State(st): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: VerifyRequest = parse(&body)?;
    let snap = st.store.get(&id)?;
    let result = blocking(move || {
        pipeline::verify_chain(&snap.workspace, &req.chain_id, req.fine_dt, req.tolerance).map_err(ApiError::from)
    })
    .await?;
    Ok(json_response(StatusCode::OK, &result))
}

/// `GET .../export/<chain>.csv` renders the chain's stored rollout; object
/// poses may be overridden with `?move=<object>:dx,dy,dz`.
async fn export(
    State(st): Shared,
    Path((id, file)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let chain_id = file
        .strip_suffix(".csv")
        .filter(|c| !c.is_empty())
        .ok_or_else(|| ApiError::bad_request(format!("export `{file}` must be named <chain>.csv")))?;
    let snap = st.store.get(&id)?;
    let mut req = RolloutRequest { chain_id: chain_id.to_string(), ..Default::default() };
    if let Some(spec) = q.get("move") {
        let (obj, delta) = parse_move(spec)?;
        let base = snap.workspace.objects.get(&obj).ok_or_else(|| ApiError::not_found("object", &obj))?;
        let pose = Pose::new(base.pose.rotation, base.pose.translation + delta);
        req.object_poses.insert(obj, pose);
    }
    let csv = pipeline::export_csv(&snap.workspace, &req)?;
    let mut res = Response::new(Body::from(csv));
    res.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("text/csv"));
    Ok(with_etag(res, snap.revision))
}

fn parse_move(spec: &str) -> Result<(String, Vec3), ApiError> {
    let bad = || ApiError::bad_request(format!("move `{spec}` must look like <object>:dx,dy,dz"));
    let (obj, rest) = spec.split_once(':').ok_or_else(bad)?;
    let nums: Vec<f64> = rest.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    match nums.as_slice() {
        [x, y, z] if nums.iter().all(|v| v.is_finite()) => Ok((obj.to_string(), Vec3::new(*x, *y, *z))),
        _ => Err(bad()),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new("internal", format!("worker failed: {e}")))?
}

/// Build the shared state for `config`, loading the data directory if set.
pub fn state(config: &Config) -> Result<Arc<AppState>, String> {
    if !(config.budget_secs.is_finite() && config.budget_secs > 0.0) {
        return Err(format!("budget must be positive, got {}", config.budget_secs));
    }
    let store = match &config.data_dir {
        Some(dir) => Store::open(dir.clone())?,
        None => Store::in_memory(),
    };
    Ok(Arc::new(AppState { store, budget_secs: config.budget_secs }))
}

pub async fn run(config: Config) -> Result<(), String> {
    let app = router(state(&config)?);
    let listener = tokio::net::TcpListener::bind(config.listen).await.map_err(|e| format!("{}: {e}", config.listen))?;
    eprintln!("listening on {}", config.listen);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}
