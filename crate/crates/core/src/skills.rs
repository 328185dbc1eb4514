//! Keypoint segmentation, per-segment fitting and solving, skill chaining and
//! object-frame goal reparameterization.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdmp::{solve, Cdmp, SolveError, SolveOptions};
use crate::dmp::{fit_lwr, DemoSample, Demonstration, DmpError, FitOptions, RolloutOverrides, Trajectory, TrajectoryState};
use crate::geometry::{ConstraintRegion, FrameRef, Pose, UnitQuat, Vec3};

/// Minimum spacing between consecutive keypoints, seconds.
pub const MIN_KEYPOINT_SPACING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SkillError {
    #[error("invalid keypoint: {0}")]
    InvalidKeypoint(String),
    #[error("segment {index} has {len} samples; at least 5 are required")]
    SegmentTooShort { index: usize, len: usize },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("segment is expressed in the world frame")]
    WorldFrameSegment,
    #[error("expected {expected} {what}, got {got}")]
    CountMismatch { what: &'static str, expected: usize, got: usize },
    #[error("unknown constraint `{0}`")]
    UnknownConstraint(String),
    #[error("segment {index}: {source}")]
    Solve { index: usize, source: SolveError },
    #[error("segment {index}: {source}")]
    Dmp { index: usize, source: DmpError },
}

impl SkillError {
    pub fn code(&self) -> &'static str {
        match self {
            SkillError::InvalidKeypoint(_) => "invalid_keypoint",
            SkillError::SegmentTooShort { .. } => "segment_too_short",
            SkillError::UnknownObject(_) | SkillError::UnknownConstraint(_) => "dangling_reference",
            SkillError::WorldFrameSegment => "world_frame_segment",
            SkillError::CountMismatch { .. } => "invalid_parameter",
            SkillError::Solve { source, .. } => source.code(),
            SkillError::Dmp { source, .. } => source.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub time: f64,
    #[serde(default)]
    pub label: String,
}

impl Keypoint {
    pub fn new(time: f64, label: impl Into<String>) -> Self {
        Keypoint { time, label: label.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub pose: Pose,
    /// Half sizes of the box drawn for the object; display only.
    #[serde(default)]
    pub display_extent: Vec3,
}

impl SceneObject {
    pub fn new(id: impl Into<String>, pose: Pose) -> Self {
        SceneObject { id: id.into(), pose, display_extent: Vec3::new(0.05, 0.05, 0.05) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSegment {
    pub cdmp: Cdmp,
    pub frame: FrameRef,
    pub goal_in_frame: Vec3,
    pub start_in_frame: Vec3,
    /// Pose of the frame object when the segment was taught.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teach_pose: Option<Pose>,
    /// Demonstrated final orientation in the segment frame; display only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_orientation_in_frame: Option<UnitQuat>,
    /// Constraint ids used instead of the global set, if overridden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint_ids: Option<Vec<String>>,
}

impl SkillSegment {
    /// Goal in world coordinates under the given object poses.
    pub fn world_goal(&self, object_poses: &BTreeMap<String, Pose>) -> Result<Vec3, SkillError> {
        match &self.frame {
            FrameRef::World => Ok(self.goal_in_frame),
            FrameRef::Object(id) => {
                let pose = object_poses.get(id).ok_or_else(|| SkillError::UnknownObject(id.clone()))?;
                Ok(pose.transform_point(self.goal_in_frame))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillChain {
    pub id: String,
    /// Demonstration the chain was taught from.
    #[serde(default)]
    pub demo_id: String,
    pub segments: Vec<SkillSegment>,
    /// Object the constraint regions move with during what-if rollouts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints_follow_object: Option<String>,
    /// Teach-time pose of `constraints_follow_object`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follow_teach_pose: Option<Pose>,
}

impl SkillChain {
    pub fn converged(&self) -> bool {
        self.segments.iter().all(|s| s.cdmp.report.converged)
    }

    /// Object ids the chain needs to resolve.
    pub fn referenced_objects(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.segments.iter().filter_map(|s| s.frame.object_id()).collect();
        ids.extend(self.constraints_follow_object.as_deref());
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Teach-time poses of every referenced object.
    pub fn teach_poses(&self) -> BTreeMap<String, Pose> {
        let mut poses = BTreeMap::new();
        for s in &self.segments {
            if let (Some(id), Some(p)) = (s.frame.object_id(), s.teach_pose) {
                poses.insert(id.to_string(), p);
            }
        }
        if let (Some(id), Some(p)) = (&self.constraints_follow_object, self.follow_teach_pose) {
            poses.insert(id.clone(), p);
        }
        poses
    }
}

fn nearest_index(samples: &[DemoSample], t: f64) -> usize {
    let span = samples[samples.len() - 1].t - samples[0].t;
    let tie = 1e-12 * span.max(1.0);
    let mut best = 0;
    for (i, s) in samples.iter().enumerate() {
        // ties go to the later sample
        if (s.t - t).abs() <= (samples[best].t - t).abs() + tie {
            best = i;
        }
    }
    best
}

/// Split `demo` at the samples nearest to each keypoint. The boundary sample
/// is shared by both neighbours and every piece starts at `t = 0`.
pub fn segment(demo: &Demonstration, keypoints: &[Keypoint]) -> Result<Vec<Demonstration>, SkillError> {
    let samples = demo.samples();
    let (t0, t1) = (samples[0].t, samples[samples.len() - 1].t);
    for (i, k) in keypoints.iter().enumerate() {
        if !(k.time.is_finite() && k.time > t0 && k.time < t1) {
            return Err(SkillError::InvalidKeypoint(format!("time {} is outside ({t0}, {t1})", k.time)));
        }
        if i > 0 && k.time - keypoints[i - 1].time < MIN_KEYPOINT_SPACING {
            return Err(SkillError::InvalidKeypoint(format!(
                "keypoints at {} and {} are closer than {MIN_KEYPOINT_SPACING} s",
                keypoints[i - 1].time,
                k.time
            )));
        }
    }
    let mut bounds = vec![0];
    bounds.extend(keypoints.iter().map(|k| nearest_index(samples, k.time)));
    bounds.push(samples.len() - 1);
    let mut out = Vec::with_capacity(bounds.len() - 1);
    for (index, w) in bounds.windows(2).enumerate() {
        let len = (w[1] + 1).saturating_sub(w[0]);
        if len < 5 {
            return Err(SkillError::SegmentTooShort { index, len });
        }
        let base = samples[w[0]].t;
        let part: Vec<DemoSample> =
            samples[w[0]..=w[1]].iter().map(|s| DemoSample { t: s.t - base, ..*s }).collect();
        let id = if keypoints.is_empty() { demo.id().to_string() } else { format!("{}#{index}", demo.id()) };
        out.push(
            Demonstration::new(id, demo.frame().clone(), part).map_err(|source| SkillError::Dmp { index, source })?,
        );
    }
    Ok(out)
}

/// Frame and constraint choice for one segment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    #[serde(default)]
    pub frame: FrameRef,
    /// Constraint ids to use instead of the global set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Vec<String>>,
}

impl SegmentSpec {
    pub fn in_frame(frame: FrameRef) -> Self {
        SegmentSpec { frame, constraints: None }
    }
}

/// Fit and solve each segment independently. Segments that exhaust the
/// solver budget are kept with their best iterate and `converged = false`.
#[allow(clippy::too_many_arguments)]
pub fn fit_chain(
    id: &str,
    demo_id: &str,
    segments: &[Demonstration],
    specs: &[SegmentSpec],
    constraints: &[ConstraintRegion],
    objects: &BTreeMap<String, SceneObject>,
    fit_opts: &FitOptions,
    solve_opts: &SolveOptions,
) -> Result<SkillChain, SkillError> {
    if segments.is_empty() {
        return Err(SkillError::CountMismatch { what: "segments", expected: 1, got: 0 });
    }
    if specs.len() != segments.len() {
        return Err(SkillError::CountMismatch { what: "segment frames", expected: segments.len(), got: specs.len() });
    }
    let clock = Instant::now();
    let mut out = Vec::with_capacity(segments.len());
    for (index, (demo, spec)) in segments.iter().zip(specs).enumerate() {
        let teach_pose = match &spec.frame {
            FrameRef::World => None,
            FrameRef::Object(oid) => {
                Some(objects.get(oid).ok_or_else(|| SkillError::UnknownObject(oid.clone()))?.pose)
            }
        };
        let regions: Vec<ConstraintRegion> = match &spec.constraints {
            None => constraints.to_vec(),
            Some(ids) => ids
                .iter()
                .map(|cid| {
                    constraints
                        .iter()
                        .find(|r| r.id() == cid)
                        .cloned()
                        .ok_or_else(|| SkillError::UnknownConstraint(cid.clone()))
                })
                .collect::<Result<_, _>>()?,
        };
        let dmp = fit_lwr(demo, fit_opts).map_err(|source| SkillError::Dmp { index, source })?;
        let opts = SolveOptions {
            time_budget: (solve_opts.time_budget - clock.elapsed().as_secs_f64()).max(1e-3),
            ..solve_opts.clone()
        };
        let cdmp = match solve(&dmp, &regions, &opts) {
            Ok(c) => c,
            Err(SolveError::Infeasible { best }) => *best,
            Err(source) => return Err(SkillError::Solve { index, source }),
        };
        let to_frame = |p: Vec3| match teach_pose {
            Some(pose) => pose.invert().transform_point(p),
            None => p,
        };
        let goal_orientation_in_frame = demo.samples()[demo.samples().len() - 1].orientation.map(|q| match teach_pose {
            Some(pose) => pose.rotation.conjugate().mul(q),
            None => q,
        });
        out.push(SkillSegment {
            goal_in_frame: to_frame(demo.end()),
            start_in_frame: to_frame(demo.start()),
            frame: spec.frame.clone(),
            teach_pose,
            goal_orientation_in_frame,
            constraint_ids: spec.constraints.clone(),
            cdmp,
        });
    }
    Ok(SkillChain {
        id: id.to_string(),
        demo_id: demo_id.to_string(),
        segments: out,
        constraints_follow_object: None,
        follow_teach_pose: None,
    })
}

/// Inputs of a chain rollout beyond the chain itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainRolloutRequest {
    /// Start of the first segment; defaults to its taught start.
    #[serde(default)]
    pub start: Option<Vec3>,
    /// Current object poses; objects not listed keep their teach-time pose.
    #[serde(default)]
    pub object_poses: BTreeMap<String, Pose>,
    /// World-frame goals replacing the resolved goal of a segment.
    #[serde(default)]
    pub goal_overrides: BTreeMap<usize, Vec3>,
    #[serde(default)]
    pub dt: Option<f64>,
    /// Per-segment horizons; default to each segment's solve horizon.
    #[serde(default)]
    pub horizons: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRollout {
    pub trajectory: Trajectory,
    /// Index of the first state of each segment; segment `i` owns states
    /// `segment_starts[i]..segment_starts[i + 1]` and the boundary state is
    /// the last state of the previous segment.
    pub segment_starts: Vec<usize>,
    /// Constraint regions of each segment, re-posed when they follow an object.
    pub segment_regions: Vec<Vec<ConstraintRegion>>,
    pub goals: Vec<Vec3>,
}

/// Roll the segments out back to back. Position carries over exactly and
/// physical velocity through `z`.
pub fn rollout_chain(chain: &SkillChain, request: &ChainRolloutRequest) -> Result<ChainRollout, SkillError> {
    if chain.segments.is_empty() {
        return Err(SkillError::CountMismatch { what: "segments", expected: 1, got: 0 });
    }
    if let Some(h) = &request.horizons {
        if h.len() != chain.segments.len() {
            return Err(SkillError::CountMismatch { what: "horizons", expected: chain.segments.len(), got: h.len() });
        }
    }
    let mut poses = chain.teach_poses();
    for (id, p) in &request.object_poses {
        poses.insert(id.clone(), *p);
    }
    for id in chain.referenced_objects() {
        if !poses.contains_key(id) {
            return Err(SkillError::UnknownObject(id.to_string()));
        }
    }
    let follow = match (&chain.constraints_follow_object, chain.follow_teach_pose) {
        (Some(id), Some(teach)) => Some(poses[id].compose(&teach.invert())),
        _ => None,
    };
    let dt = request.dt.unwrap_or(chain.segments[0].cdmp.dt);

    let mut states: Vec<TrajectoryState> = Vec::new();
    let mut segment_starts = Vec::with_capacity(chain.segments.len());
    let mut segment_regions = Vec::with_capacity(chain.segments.len());
    let mut goals = Vec::with_capacity(chain.segments.len());
    let mut prev: Option<(TrajectoryState, f64)> = None;
    for (index, seg) in chain.segments.iter().enumerate() {
        let goal = match request.goal_overrides.get(&index) {
            Some(g) => *g,
            None => seg.world_goal(&poses)?,
        };
        let tau = seg.cdmp.dmp.canonical.tau;
        let overrides = match &prev {
            None => RolloutOverrides {
                y0: request.start,
                g: (seg.frame != FrameRef::World || request.goal_overrides.contains_key(&index)).then_some(goal),
                ..RolloutOverrides::default()
            },
            Some((last, prev_tau)) => RolloutOverrides {
                y0: Some(last.y),
                g: Some(goal),
                z0: Some(last.z * (tau / prev_tau)),
                ..RolloutOverrides::default()
            },
        };
        let horizon = request.horizons.as_ref().map_or(seg.cdmp.horizon, |h| h[index]);
        let tr = seg.cdmp.rollout(&overrides, dt, horizon).map_err(|source| SkillError::Dmp { index, source })?;
        let offset = states.len().saturating_sub(1);
        segment_starts.push(states.len());
        let skip = usize::from(prev.is_some());
        states.extend(tr.states[skip..].iter().enumerate().map(|(k, s)| TrajectoryState {
            t: (offset + k + skip) as f64 * dt,
            ..*s
        }));
        prev = Some((*tr.last(), tau));
        segment_regions.push(match follow {
            Some(t) => seg.cdmp.constraints.iter().map(|r| r.transformed(&t)).collect(),
            None => seg.cdmp.constraints.clone(),
        });
        goals.push(goal);
    }
    Ok(ChainRollout { trajectory: Trajectory { dt, frame: FrameRef::World, states }, segment_starts, segment_regions, goals })
}

/// Spec-shaped entry point: explicit start, object poses, step and horizons.
pub fn rollout_chain_at(
    chain: &SkillChain,
    start: Vec3,
    object_poses: &BTreeMap<String, Pose>,
    dt: f64,
    horizons: Option<&[f64]>,
) -> Result<Trajectory, SkillError> {
    let request = ChainRolloutRequest {
        start: Some(start),
        object_poses: object_poses.clone(),
        goal_overrides: BTreeMap::new(),
        dt: Some(dt),
        horizons: horizons.map(<[f64]>::to_vec),
    };
    Ok(rollout_chain(chain, &request)?.trajectory)
}

/// World goal of an object-frame segment if its object moved to `new_pose`.
pub fn reparameterize_goal(segment: &SkillSegment, new_pose: &Pose) -> Result<Vec3, SkillError> {
    match segment.frame {
        FrameRef::World => Err(SkillError::WorldFrameSegment),
        FrameRef::Object(_) => Ok(new_pose.transform_point(segment.goal_in_frame)),
    }
}
