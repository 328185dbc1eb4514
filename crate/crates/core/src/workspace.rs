//! Persistent scene model: demonstrations, constraints, objects, keypoints and
//! fitted chains, saved as one canonical JSON document.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdmp::SolveOptions;
use crate::dmp::{Demonstration, FitOptions};
use crate::export::to_canonical_vec;
use crate::geometry::{ConstraintRegion, GeometryError, Shape};
use crate::skills::{Keypoint, SceneObject, SkillChain, MIN_KEYPOINT_SPACING};

pub const SCHEMA_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = ".cdmpws.json";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkspaceError {
    #[error("unsupported schema version {found} (this build reads up to {SCHEMA_VERSION})")]
    UnknownSchemaVersion { found: u64 },
    #[error("{kind} `{owner}` references missing {target_kind} `{id}`")]
    DanglingReference { kind: &'static str, owner: String, target_kind: &'static str, id: String },
    #[error("malformed workspace: {0}")]
    Malformed(String),
    #[error("{kind} `{id}` already exists")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{kind} `{id}` is referenced by {}; remove with cascade", .dependents.join(", "))]
    Referenced { kind: &'static str, id: String, dependents: Vec<String> },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid {kind}: {message}")]
    Invalid { kind: &'static str, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl WorkspaceError {
    pub fn code(&self) -> &'static str {
        match self {
            WorkspaceError::UnknownSchemaVersion { .. } => "unknown_schema_version",
            WorkspaceError::DanglingReference { .. } => "dangling_reference",
            WorkspaceError::Malformed(_) => "malformed_workspace",
            WorkspaceError::DuplicateId { .. } => "duplicate_id",
            WorkspaceError::NotFound { .. } => "not_found",
            WorkspaceError::Referenced { .. } => "referenced",
            WorkspaceError::Geometry(e) => e.code(),
            WorkspaceError::Invalid { kind: "keypoint", .. } => "invalid_keypoint",
            WorkspaceError::Invalid { .. } => "invalid_parameter",
            WorkspaceError::Io(_) => "io_error",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DefaultParams {
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub solve: SolveOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub schema_version: u32,
    pub id: String,
    #[serde(default)]
    pub demonstrations: BTreeMap<String, Demonstration>,
    #[serde(default)]
    pub constraints: Vec<ConstraintRegion>,
    #[serde(default)]
    pub objects: BTreeMap<String, SceneObject>,
    #[serde(default)]
    pub keypoints: BTreeMap<String, Vec<Keypoint>>,
    #[serde(default)]
    pub chains: BTreeMap<String, SkillChain>,
    #[serde(default)]
    pub default_params: DefaultParams,
}

fn dangling(kind: &'static str, owner: &str, target_kind: &'static str, id: &str) -> WorkspaceError {
    WorkspaceError::DanglingReference { kind, owner: owner.to_string(), target_kind, id: id.to_string() }
}

fn invalid(kind: &'static str, message: impl Into<String>) -> WorkspaceError {
    WorkspaceError::Invalid { kind, message: message.into() }
}

/// Keypoint ordering, spacing and span rules for one demonstration.
pub fn validate_keypoints(demo: &Demonstration, keypoints: &[Keypoint]) -> Result<(), WorkspaceError> {
    let samples = demo.samples();
    let (t0, t1) = (samples[0].t, samples[samples.len() - 1].t);
    for (i, k) in keypoints.iter().enumerate() {
        if !(k.time > t0 && k.time < t1) {
            return Err(invalid("keypoint", format!("time {} outside ({t0}, {t1}) of `{}`", k.time, demo.id())));
        }
        if i > 0 && k.time - keypoints[i - 1].time < MIN_KEYPOINT_SPACING {
            return Err(invalid(
                "keypoint",
                format!("keypoints must increase by at least {MIN_KEYPOINT_SPACING} s"),
            ));
        }
    }
    Ok(())
}

impl Workspace {
    pub fn new(id: impl Into<String>) -> Self {
        Workspace {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            demonstrations: BTreeMap::new(),
            constraints: Vec::new(),
            objects: BTreeMap::new(),
            keypoints: BTreeMap::new(),
            chains: BTreeMap::new(),
            default_params: DefaultParams::default(),
        }
    }

    pub fn constraint(&self, id: &str) -> Option<&ConstraintRegion> {
        self.constraints.iter().find(|r| r.id() == id)
    }

    /// Full integrity check: ids match their keys and are unique, every
    /// cross-reference resolves.
    pub fn validate(&self) -> Result<(), WorkspaceError> {
        if self.schema_version > SCHEMA_VERSION {
            return Err(WorkspaceError::UnknownSchemaVersion { found: u64::from(self.schema_version) });
        }
        if self.id.is_empty() {
            return Err(invalid("workspace", "id must not be empty"));
        }
        for (key, d) in &self.demonstrations {
            if key != d.id() {
                return Err(invalid("demonstration", format!("key `{key}` does not match id `{}`", d.id())));
            }
            if let Some(obj) = d.frame().object_id() {
                if !self.objects.contains_key(obj) {
                    return Err(dangling("demonstration", key, "object", obj));
                }
            }
        }
        for (i, r) in self.constraints.iter().enumerate() {
            if self.constraints[..i].iter().any(|o| o.id() == r.id()) {
                return Err(WorkspaceError::DuplicateId { kind: "constraint", id: r.id().to_string() });
            }
        }
        for (key, o) in &self.objects {
            if key != &o.id {
                return Err(invalid("object", format!("key `{key}` does not match id `{}`", o.id)));
            }
            validate_object(o)?;
        }
        for (demo_id, kps) in &self.keypoints {
            let demo = self.demonstrations.get(demo_id).ok_or_else(|| dangling("keypoints", demo_id, "demonstration", demo_id))?;
            validate_keypoints(demo, kps)?;
        }
        for (key, c) in &self.chains {
            if key != &c.id {
                return Err(invalid("chain", format!("key `{key}` does not match id `{}`", c.id)));
            }
            if c.segments.is_empty() {
                return Err(invalid("chain", format!("`{key}` has no segments")));
            }
            if !c.demo_id.is_empty() && !self.demonstrations.contains_key(&c.demo_id) {
                return Err(dangling("chain", key, "demonstration", &c.demo_id));
            }
            for obj in c.referenced_objects() {
                if !self.objects.contains_key(obj) {
                    return Err(dangling("chain", key, "object", obj));
                }
            }
            for cid in c.segments.iter().filter_map(|s| s.constraint_ids.as_ref()).flatten() {
                if self.constraint(cid).is_none() {
                    return Err(dangling("chain", key, "constraint", cid));
                }
            }
        }
        Ok(())
    }

    /// Entities that reference the given one, as `kind:id` labels.
    pub fn dependents(&self, target: &Target) -> Vec<String> {
        let mut out = Vec::new();
        match target {
            Target::Demonstration(id) => {
                if self.keypoints.contains_key(id) {
                    out.push(format!("keypoints:{id}"));
                }
                out.extend(self.chains.values().filter(|c| &c.demo_id == id).map(|c| format!("chain:{}", c.id)));
            }
            Target::Object(id) => {
                out.extend(
                    self.demonstrations
                        .values()
                        .filter(|d| d.frame().object_id() == Some(id.as_str()))
                        .map(|d| format!("demonstration:{}", d.id())),
                );
                out.extend(
                    self.chains
                        .values()
                        .filter(|c| c.referenced_objects().contains(&id.as_str()))
                        .map(|c| format!("chain:{}", c.id)),
                );
            }
            Target::Constraint(id) => {
                out.extend(
                    self.chains
                        .values()
                        .filter(|c| c.segments.iter().filter_map(|s| s.constraint_ids.as_ref()).flatten().any(|x| x == id))
                        .map(|c| format!("chain:{}", c.id)),
                );
            }
        }
        out
    }

    pub fn to_canonical_bytes(&self) -> Result<Vec<u8>, WorkspaceError> {
        let mut bytes = to_canonical_vec(self).map_err(|e| WorkspaceError::Malformed(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Workspace, WorkspaceError> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| WorkspaceError::Malformed(e.to_string()))?;
        let version = value
            .get("schema_version")
            .ok_or_else(|| WorkspaceError::Malformed("missing schema_version".into()))?
            .as_u64()
            .ok_or_else(|| WorkspaceError::Malformed("schema_version must be a non-negative integer".into()))?;
        if version > u64::from(SCHEMA_VERSION) {
            return Err(WorkspaceError::UnknownSchemaVersion { found: version });
        }
        // parse the bytes again rather than the Value so floats keep full precision
        let ws: Workspace = serde_json::from_slice(bytes).map_err(|e| WorkspaceError::Malformed(e.to_string()))?;
        ws.validate()?;
        Ok(ws)
    }
}

fn validate_object(o: &SceneObject) -> Result<(), WorkspaceError> {
    if o.id.is_empty() {
        return Err(invalid("object", "id must not be empty"));
    }
    if !o.pose.is_finite() {
        return Err(invalid("object", format!("pose of `{}` must be finite", o.id)));
    }
    let e = o.display_extent;
    if !(e.is_finite() && e.x >= 0.0 && e.y >= 0.0 && e.z >= 0.0) {
        return Err(invalid("object", format!("display extent of `{}` must be non-negative", o.id)));
    }
    Ok(())
}

/// Validate and write `ws` to `path` in canonical form.
pub fn save(ws: &Workspace, path: &Path) -> Result<(), WorkspaceError> {
    ws.validate()?;
    let bytes = ws.to_canonical_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| WorkspaceError::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| WorkspaceError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Workspace, WorkspaceError> {
    let bytes = fs::read(path).map_err(|e| WorkspaceError::Io(format!("{}: {e}", path.display())))?;
    Workspace::from_slice(&bytes)
}

/// Entity addressed by a removal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Target {
    Demonstration(String),
    Constraint(String),
    Object(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    AddDemonstration { demonstration: Demonstration },
    UpdateDemonstration { demonstration: Demonstration },
    AddConstraint { id: String, #[serde(flatten)] shape: Shape, margin: f64 },
    UpdateConstraint { id: String, #[serde(flatten)] shape: Shape, margin: f64 },
    AddObject { object: SceneObject },
    UpdateObject { object: SceneObject },
    Remove { target: Target, #[serde(default)] cascade: bool },
    SetKeypoints { demo_id: String, keypoints: Vec<Keypoint> },
    ClearKeypoints { demo_id: String },
    PutChain { chain: SkillChain },
    RemoveChain { id: String },
    SetDefaults { params: DefaultParams },
}

/// Result of a mutation: the new value and any dependents removed by cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct Mutation {
    pub workspace: Workspace,
    pub removed: Vec<String>,
}

/// Apply `command` to a copy of `ws`. The input is never modified.
pub fn mutate(ws: &Workspace, command: Command) -> Result<Mutation, WorkspaceError> {
    let mut next = ws.clone();
    let mut removed = Vec::new();
    match command {
        Command::AddDemonstration { demonstration } => {
            let id = demonstration.id().to_string();
            if next.demonstrations.contains_key(&id) {
                return Err(WorkspaceError::DuplicateId { kind: "demonstration", id });
            }
            next.demonstrations.insert(id, demonstration);
        }
        Command::UpdateDemonstration { demonstration } => {
            let id = demonstration.id().to_string();
            if !next.demonstrations.contains_key(&id) {
                return Err(WorkspaceError::NotFound { kind: "demonstration", id });
            }
            next.demonstrations.insert(id, demonstration);
        }
        Command::AddConstraint { id, shape, margin } => {
            let region = ConstraintRegion::new(id, shape, margin)?;
            if next.constraint(region.id()).is_some() {
                return Err(WorkspaceError::DuplicateId { kind: "constraint", id: region.id().to_string() });
            }
            next.constraints.push(region);
        }
        Command::UpdateConstraint { id, shape, margin } => {
            let region = ConstraintRegion::new(id, shape, margin)?;
            let slot = next
                .constraints
                .iter_mut()
                .find(|r| r.id() == region.id())
                .ok_or_else(|| WorkspaceError::NotFound { kind: "constraint", id: region.id().to_string() })?;
            *slot = region;
        }
        Command::AddObject { object } => {
            validate_object(&object)?;
            if next.objects.contains_key(&object.id) {
                return Err(WorkspaceError::DuplicateId { kind: "object", id: object.id });
            }
            next.objects.insert(object.id.clone(), object);
        }
        Command::UpdateObject { object } => {
            validate_object(&object)?;
            if !next.objects.contains_key(&object.id) {
                return Err(WorkspaceError::NotFound { kind: "object", id: object.id });
            }
            next.objects.insert(object.id.clone(), object);
        }
        Command::Remove { target, cascade } => {
            let (kind, id) = match &target {
                Target::Demonstration(id) => ("demonstration", id),
                Target::Constraint(id) => ("constraint", id),
                Target::Object(id) => ("object", id),
            };
            let exists = match &target {
                Target::Demonstration(id) => next.demonstrations.contains_key(id),
                Target::Constraint(id) => next.constraint(id).is_some(),
                Target::Object(id) => next.objects.contains_key(id),
            };
            if !exists {
                return Err(WorkspaceError::NotFound { kind, id: id.clone() });
            }
            let dependents = next.dependents(&target);
            if !dependents.is_empty() && !cascade {
                return Err(WorkspaceError::Referenced { kind, id: id.clone(), dependents });
            }
            // a demonstration removed for an object may itself own keypoints and chains
            let mut queue = dependents;
            while let Some(label) = queue.pop() {
                if removed.contains(&label) {
                    continue;
                }
                let (dep_kind, dep_id) = label.split_once(':').expect("labels are kind:id");
                match dep_kind {
                    "keypoints" => {
                        next.keypoints.remove(dep_id);
                    }
                    "chain" => {
                        next.chains.remove(dep_id);
                    }
                    "demonstration" => {
                        queue.extend(next.dependents(&Target::Demonstration(dep_id.to_string())));
                        next.demonstrations.remove(dep_id);
                    }
                    _ => unreachable!("unknown dependent kind {dep_kind}"),
                }
                removed.push(label);
            }
            removed.sort();
            match target {
                Target::Demonstration(id) => {
                    next.demonstrations.remove(&id);
                }
                Target::Constraint(id) => next.constraints.retain(|r| r.id() != id),
                Target::Object(id) => {
                    next.objects.remove(&id);
                }
            }
        }
        Command::SetKeypoints { demo_id, keypoints } => {
            let demo = next
                .demonstrations
                .get(&demo_id)
                .ok_or_else(|| WorkspaceError::NotFound { kind: "demonstration", id: demo_id.clone() })?;
            validate_keypoints(demo, &keypoints)?;
            next.keypoints.insert(demo_id, keypoints);
        }
        Command::ClearKeypoints { demo_id } => {
            next.keypoints.remove(&demo_id);
        }
        Command::PutChain { chain } => {
            next.chains.insert(chain.id.clone(), chain);
        }
        Command::RemoveChain { id } => {
            if next.chains.remove(&id).is_none() {
                return Err(WorkspaceError::NotFound { kind: "chain", id });
            }
        }
        Command::SetDefaults { params } => {
            params.solve.validate().map_err(|e| invalid("solve options", e.to_string()))?;
            next.default_params = params;
        }
    }
    next.validate()?;
    Ok(Mutation { workspace: next, removed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FrameRef, Pose, Vec3};
    use crate::synth;

    fn sphere(id: &str, radius: f64) -> Command {
        Command::AddConstraint {
            id: id.into(),
            shape: Shape::Sphere { center: Vec3::new(0.5, 0.0, 0.0), radius },
            margin: 0.02,
        }
    }

    fn base() -> Workspace {
        let demo = synth::minjerk_line("line", Vec3::ZERO, Vec3::X, 1.0, 0.01).unwrap();
        let ws = Workspace::new("w");
        let ws = mutate(&ws, Command::AddDemonstration { demonstration: demo }).unwrap().workspace;
        let ws = mutate(&ws, sphere("s", 0.1)).unwrap().workspace;
        let obj = SceneObject::new("hole", Pose::translation(Vec3::new(0.3, 0.0, 0.0)));
        mutate(&ws, Command::AddObject { object: obj }).unwrap().workspace
    }

    #[test]
    fn empty_workspace_round_trips() {
        let ws = Workspace::new("empty");
        let bytes = ws.to_canonical_bytes().unwrap();
        assert_eq!(Workspace::from_slice(&bytes).unwrap(), ws);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("{\"schema_version\":1,\"id\":\"empty\",\"demonstrations\""), "{text}");
    }

    #[test]
    fn negative_radius_is_invalid_geometry() {
        let e = mutate(&Workspace::new("w"), sphere("bad", -1.0)).unwrap_err();
        assert_eq!(e.code(), "invalid_geometry");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let ws = base();
        assert_eq!(mutate(&ws, sphere("s", 0.2)).unwrap_err().code(), "duplicate_id");
        let obj = SceneObject::new("hole", Pose::IDENTITY);
        assert_eq!(mutate(&ws, Command::AddObject { object: obj }).unwrap_err().code(), "duplicate_id");
    }

    fn with_chain(ws: &Workspace) -> Workspace {
        let demo = &ws.demonstrations["line"];
        let objects = ws.objects.clone();
        let spec = crate::skills::SegmentSpec::in_frame(FrameRef::Object("hole".into()));
        let chain = crate::skills::fit_chain(
            "c1",
            "line",
            std::slice::from_ref(demo),
            &[spec],
            &[],
            &objects,
            &FitOptions::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        mutate(ws, Command::PutChain { chain }).unwrap().workspace
    }

    #[test]
    fn removing_referenced_object_needs_cascade() {
        let ws = with_chain(&base());
        let remove = |cascade| Command::Remove { target: Target::Object("hole".into()), cascade };
        match mutate(&ws, remove(false)).unwrap_err() {
            WorkspaceError::Referenced { dependents, .. } => assert_eq!(dependents, vec!["chain:c1"]),
            e => panic!("{e:?}"),
        }
        let m = mutate(&ws, remove(true)).unwrap();
        assert_eq!(m.removed, vec!["chain:c1"]);
        assert!(m.workspace.objects.is_empty() && m.workspace.chains.is_empty());
        // the input value is untouched
        assert!(ws.chains.contains_key("c1"));
    }

    #[test]
    fn dangling_reference_names_the_id() {
        let ws = with_chain(&base());
        let mut v: serde_json::Value = serde_json::from_slice(&ws.to_canonical_bytes().unwrap()).unwrap();
        v["objects"].as_object_mut().unwrap().clear();
        let e = Workspace::from_slice(v.to_string().as_bytes()).unwrap_err();
        assert_eq!(e.code(), "dangling_reference");
        assert!(e.to_string().contains("`hole`"), "{e}");
    }

    #[test]
    fn unknown_schema_version_and_malformed_files() {
        let e = Workspace::from_slice(br#"{"schema_version": 99, "id": "x"}"#).unwrap_err();
        assert_eq!(e, WorkspaceError::UnknownSchemaVersion { found: 99 });
        assert_eq!(Workspace::from_slice(b"{not json").unwrap_err().code(), "malformed_workspace");
        assert_eq!(Workspace::from_slice(br#"{"id": "x"}"#).unwrap_err().code(), "malformed_workspace");
    }

    #[test]
    fn keypoints_follow_demo_rules() {
        let ws = base();
        let set = |t: Vec<f64>| Command::SetKeypoints {
            demo_id: "line".into(),
            keypoints: t.into_iter().map(|t| Keypoint::new(t, "")).collect(),
        };
        assert!(mutate(&ws, set(vec![0.5])).is_ok());
        assert_eq!(mutate(&ws, set(vec![1.5])).unwrap_err().code(), "invalid_keypoint");
        assert_eq!(mutate(&ws, set(vec![0.5, 0.55])).unwrap_err().code(), "invalid_keypoint");
        let missing = Command::SetKeypoints { demo_id: "nope".into(), keypoints: vec![] };
        assert_eq!(mutate(&ws, missing).unwrap_err().code(), "not_found");
    }

    #[test]
    fn commands_parse_from_json() {
        let c: Command = serde_json::from_str(
            r#"{"op":"add_constraint","id":"b","type":"box","pose":{"rotation":[1,0,0,0],"translation":[0,0,0]},"half_extents":[0.1,0.1,0.1],"margin":0.0}"#,
        )
        .unwrap();
        assert!(mutate(&Workspace::new("w"), c).is_ok());
        let r: Command = serde_json::from_str(r#"{"op":"remove","target":{"kind":"object","id":"hole"},"cascade":true}"#).unwrap();
        assert_eq!(r, Command::Remove { target: Target::Object("hole".into()), cascade: true });
    }
}
