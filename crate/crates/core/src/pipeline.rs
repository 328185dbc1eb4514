//! Workspace-level operations shared by the command line and the HTTP
//! service. Both front ends call these and serialize the results with
//! [`crate::export::to_canonical_string`], so their numbers agree bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdmp::{verify, SolveError, SolveOptions, SolveReport};
use crate::dmp::{fit_lwr, rmse_against, rollout, Dmp, DmpError, FitOptions, Gains, RolloutOverrides, Trajectory};
use crate::export::{chain_csv, segment_of};
use crate::geometry::{min_sdf, ConstraintRegion, FrameRef, Pose, Vec3};
use crate::skills::{fit_chain, rollout_chain, segment, ChainRollout, ChainRolloutRequest, SegmentSpec, SkillError};
use crate::workspace::{mutate, Command, Workspace, WorkspaceError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Dmp(#[from] DmpError),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::NotFound { .. } => "not_found",
            PipelineError::BadRequest(_) => "bad_request",
            PipelineError::Workspace(e) => e.code(),
            PipelineError::Skill(e) => e.code(),
            PipelineError::Solve(e) => e.code(),
            PipelineError::Dmp(e) => e.code(),
        }
    }
}

fn not_found(kind: &'static str, id: &str) -> PipelineError {
    PipelineError::NotFound { kind, id: id.to_string() }
}

/// One trajectory state as reported to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    /// Smallest `sdf - margin` over the active regions; absent without regions.
    pub min_sdf: Option<f64>,
    pub violating_region: Option<String>,
}

fn sample(s: &crate::dmp::TrajectoryState, regions: &[ConstraintRegion]) -> Sample {
    let (min_sdf, violating_region) = match min_sdf(regions, s.y) {
        Ok((d, id)) => (Some(d), (d < 0.0).then(|| id.to_string())),
        Err(_) => (None, None),
    };
    Sample { t: s.t, position: s.y, velocity: s.v, min_sdf, violating_region }
}

pub fn samples(traj: &Trajectory, regions: &[ConstraintRegion]) -> Vec<Sample> {
    traj.states.iter().map(|s| sample(s, regions)).collect()
}

fn chain_samples(r: &ChainRollout) -> Vec<Sample> {
    r.trajectory
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| sample(s, &r.segment_regions[segment_of(&r.segment_starts, i)]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRequest {
    pub demo_id: String,
    #[serde(default)]
    pub n_basis: Option<usize>,
    #[serde(default)]
    pub gains: Option<Gains>,
    #[serde(default)]
    pub gate_forcing: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub demo_id: String,
    pub n_basis: usize,
    pub rmse: f64,
    pub path_length: f64,
    pub dmp: Dmp,
    pub rollout: Vec<Sample>,
}

fn fit_options(ws: &Workspace, n_basis: Option<usize>, gains: Option<Gains>, gate: Option<bool>) -> FitOptions {
    let d = &ws.default_params.fit;
    FitOptions {
        n_basis: n_basis.unwrap_or(d.n_basis),
        gains: gains.unwrap_or(d.gains),
        gate_forcing: gate.unwrap_or(d.gate_forcing),
        smoothing: d.smoothing,
    }
}

/// Fit a demonstration and roll the primitive out over the demonstrated span.
pub fn fit(ws: &Workspace, req: &FitRequest) -> Result<FitResult, PipelineError> {
    let demo = ws.demonstrations.get(&req.demo_id).ok_or_else(|| not_found("demonstration", &req.demo_id))?;
    let opts = fit_options(ws, req.n_basis, req.gains, req.gate_forcing);
    let dmp = fit_lwr(demo, &opts)?;
    let traj = rollout(&dmp, None, &RolloutOverrides::default(), ws.default_params.solve.dt, dmp.duration)?;
    Ok(FitResult {
        demo_id: req.demo_id.clone(),
        n_basis: opts.n_basis,
        rmse: rmse_against(&traj, demo),
        path_length: traj.path_length(),
        dmp,
        rollout: samples(&traj, &[]),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveRequest {
    pub demo_id: String,
    /// Id of the stored chain; defaults to the demonstration id.
    #[serde(default)]
    pub chain_id: Option<String>,
    /// Split at the demonstration's stored keypoints.
    #[serde(default)]
    pub segment_keypoints: bool,
    /// One entry per segment; all world-frame when absent.
    #[serde(default)]
    pub segments: Option<Vec<SegmentSpec>>,
    #[serde(default)]
    pub constraints_follow_object: Option<String>,
    #[serde(default)]
    pub n_basis: Option<usize>,
    #[serde(default)]
    pub gate_forcing: Option<bool>,
    #[serde(default)]
    pub options: Option<SolveOptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub frame: FrameRef,
    pub start_in_frame: Vec3,
    pub goal_in_frame: Vec3,
    pub zeta_norm: f64,
    pub report: SolveReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub chain_id: String,
    pub converged: bool,
    pub segments: Vec<SegmentSummary>,
    pub rollout: Vec<Sample>,
}

impl SolveResult {
    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> SolveResult {
        let mut out = self.clone();
        for s in &mut out.segments {
            s.report.wall_time = 0.0;
        }
        out
    }
}

/// Fit, segment, solve and store a chain. A chain whose solve ran out of
/// iterations or time is stored and returned with `converged = false`.
pub fn solve(ws: &Workspace, req: &SolveRequest) -> Result<(Workspace, SolveResult), PipelineError> {
    let demo = ws.demonstrations.get(&req.demo_id).ok_or_else(|| not_found("demonstration", &req.demo_id))?;
    let keypoints = if req.segment_keypoints {
        ws.keypoints.get(&req.demo_id).cloned().unwrap_or_default()
    } else {
        Vec::new()
    };
    let parts = segment(demo, &keypoints)?;
    let specs = match &req.segments {
        Some(s) => s.clone(),
        None => vec![SegmentSpec::default(); parts.len()],
    };
    if specs.len() != parts.len() {
        return Err(PipelineError::BadRequest(format!(
            "{} segment specs given for {} segments",
            specs.len(),
            parts.len()
        )));
    }
    let fit_opts = fit_options(ws, req.n_basis, None, req.gate_forcing);
    let solve_opts = req.options.clone().unwrap_or_else(|| ws.default_params.solve.clone());
    solve_opts.validate()?;
    let chain_id = req.chain_id.clone().unwrap_or_else(|| req.demo_id.clone());
    let mut chain =
        fit_chain(&chain_id, &req.demo_id, &parts, &specs, &ws.constraints, &ws.objects, &fit_opts, &solve_opts)?;
    if let Some(obj) = &req.constraints_follow_object {
        let pose = ws.objects.get(obj).ok_or_else(|| not_found("object", obj))?.pose;
        chain.constraints_follow_object = Some(obj.clone());
        chain.follow_teach_pose = Some(pose);
    }
    let rolled = rollout_chain(&chain, &ChainRolloutRequest::default())?;
    let result = SolveResult {
        chain_id: chain_id.clone(),
        converged: chain.converged(),
        segments: chain
            .segments
            .iter()
            .map(|s| SegmentSummary {
                frame: s.frame.clone(),
                start_in_frame: s.start_in_frame,
                goal_in_frame: s.goal_in_frame,
                zeta_norm: s.cdmp.zeta_norm(),
                report: s.cdmp.report.clone(),
            })
            .collect(),
        rollout: chain_samples(&rolled),
    };
    let next = mutate(ws, Command::PutChain { chain })?.workspace;
    Ok((next, result))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    pub chain_id: String,
    #[serde(default)]
    pub start: Option<Vec3>,
    /// Replacement object poses; other objects keep their workspace pose.
    #[serde(default)]
    pub object_poses: BTreeMap<String, Pose>,
    /// World goals by segment index.
    #[serde(default)]
    pub goal_overrides: BTreeMap<usize, Vec3>,
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub chain_id: String,
    pub goals: Vec<Vec3>,
    pub segment_starts: Vec<usize>,
    pub rollout: Vec<Sample>,
}

fn chain_rollout(ws: &Workspace, req: &RolloutRequest) -> Result<ChainRollout, PipelineError> {
    let chain = ws.chains.get(&req.chain_id).ok_or_else(|| not_found("chain", &req.chain_id))?;
    let mut poses: BTreeMap<String, Pose> = ws.objects.iter().map(|(k, o)| (k.clone(), o.pose)).collect();
    for (id, p) in &req.object_poses {
        if !poses.contains_key(id) {
            return Err(not_found("object", id));
        }
        poses.insert(id.clone(), *p);
    }
    let request = ChainRolloutRequest {
        start: req.start,
        object_poses: poses,
        goal_overrides: req.goal_overrides.clone(),
        dt: req.dt,
        horizons: None,
    };
    Ok(rollout_chain(chain, &request)?)
}

/// What-if rollout of a stored chain; the workspace is not modified.
pub fn rollout_what_if(ws: &Workspace, req: &RolloutRequest) -> Result<RolloutResult, PipelineError> {
    let r = chain_rollout(ws, req)?;
    Ok(RolloutResult {
        chain_id: req.chain_id.clone(),
        goals: r.goals.clone(),
        segment_starts: r.segment_starts.clone(),
        rollout: chain_samples(&r),
    })
}

/// CSV of a stored chain rolled out under the current object poses.
pub fn export_csv(ws: &Workspace, req: &RolloutRequest) -> Result<String, PipelineError> {
    Ok(chain_csv(&chain_rollout(ws, req)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub chain_id: String,
    pub fine_dt: f64,
    pub tolerance: f64,
    /// Worst violation of each segment rolled out on its own.
    pub segment_violations: Vec<f64>,
    /// Worst violation of the chained rollout at `fine_dt`.
    pub chain_violation: f64,
    pub ok: bool,
}

/// Fine-grid safety check of a stored chain, per segment and chained.
pub fn verify_chain(ws: &Workspace, chain_id: &str, fine_dt: f64, tolerance: f64) -> Result<VerifyResult, PipelineError> {
    let chain = ws.chains.get(chain_id).ok_or_else(|| not_found("chain", chain_id))?;
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(PipelineError::BadRequest(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let segment_violations = chain
        .segments
        .iter()
        .map(|s| verify(&s.cdmp, fine_dt).map(|r| r.fine_check_violation))
        .collect::<Result<Vec<_>, _>>()?;
    let req = RolloutRequest { chain_id: chain_id.to_string(), dt: Some(fine_dt), ..Default::default() };
    let chained = chain_samples(&chain_rollout(ws, &req)?);
    let chain_violation = chained.iter().filter_map(|s| s.min_sdf).fold(0.0f64, |m, d| m.max(-d));
    let ok = chain_violation <= tolerance && segment_violations.iter().all(|v| *v <= tolerance);
    Ok(VerifyResult {
        chain_id: chain_id.to_string(),
        fine_dt,
        tolerance,
        segment_violations,
        chain_violation,
        ok,
    })
}
