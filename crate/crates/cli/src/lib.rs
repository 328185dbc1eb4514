//! `cdmp` command-line driver. Every subcommand goes through the same
//! pipeline functions as the HTTP service and prints canonical JSON, so the
//! two front ends agree byte for byte on numeric output.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdmp_core::dmp::{DmpError, Demonstration};
use cdmp_core::export::{format_f64, to_canonical_string};
use cdmp_core::geometry::{FrameRef, GeometryError, Pose, Shape, UnitQuat, Vec3};
use cdmp_core::pipeline::{self, FitRequest, PipelineError, RolloutRequest, SolveRequest};
use cdmp_core::skills::{Keypoint, SceneObject, SegmentSpec};
use cdmp_core::synth;
use cdmp_core::workspace::{load, mutate, save, Command as Mutation, Workspace, WorkspaceError};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cdmp", version, about = "Constrained movement primitives: fit, solve, chain, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write a synthetic demonstration as JSON.
    DemoSynth(DemoSynthArgs),
    /// Create an empty workspace file.
    Init(InitArgs),
    /// Add or replace a demonstration from a JSON file.
    AddDemo(AddDemoArgs),
    /// Add or replace a spherical forbidden region.
    #[command(allow_negative_numbers = true)]
    AddSphere(AddSphereArgs),
    /// Add or replace a box-shaped forbidden region.
    #[command(allow_negative_numbers = true)]
    AddBox(AddBoxArgs),
    /// Add or move a scene object.
    #[command(allow_negative_numbers = true)]
    AddObject(AddObjectArgs),
    /// Append a segmentation keypoint to a demonstration.
    AddKeypoint(AddKeypointArgs),
    /// Fit a DMP to a demonstration and print the RMSE.
    Fit(FitArgs),
    /// Fit and solve a constrained chain, writing it back to the workspace.
    Solve(SolveArgs),
    /// What-if rollout of a stored chain to CSV.
    #[command(allow_negative_numbers = true)]
    Rollout(RolloutArgs),
    /// Fine-grid safety check of a stored chain; exit 0 iff it passes.
    Verify(VerifyArgs),
    /// Run the HTTP service.
    Serve(cdmp_service::Config),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DemoKind {
    MinjerkLine,
    Arc,
    PegInsert,
}

#[derive(Debug, Args)]
pub struct DemoSynthArgs {
    #[arg(long, value_enum)]
    pub kind: DemoKind,
    /// Seconds.
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    /// Demonstration id; defaults to the kind name.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    /// Workspace id; defaults to the file stem.
    #[arg(long)]
    pub id: Option<String>,
    /// Overwrite an existing file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AddDemoArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    /// Demonstration JSON as written by `demo-synth`.
    #[arg(long)]
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct AddSphereArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    pub center: Vec<f64>,
    #[arg(long)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Args)]
pub struct AddBoxArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    pub center: Vec<f64>,
    #[arg(long, num_args = 3, value_names = ["HX", "HY", "HZ"])]
    pub half_extents: Vec<f64>,
    /// Orientation quaternion, scalar first.
    #[arg(long, num_args = 4, value_names = ["W", "X", "Y", "Z"])]
    pub quat: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Args)]
pub struct AddObjectArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    pub position: Vec<f64>,
    #[arg(long, num_args = 4, value_names = ["W", "X", "Y", "Z"])]
    pub quat: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct AddKeypointArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub demo: String,
    /// Seconds from the start of the demonstration.
    #[arg(long)]
    pub time: f64,
    #[arg(long, default_value = "")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub demo: String,
    #[arg(long = "n", default_value_t = 30)]
    pub n_basis: usize,
    /// Let the forcing term act without the phase gate.
    #[arg(long)]
    pub no_gate: bool,
    /// Print the full fit result as JSON instead of the RMSE line.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub demo: String,
    /// Chain id; defaults to the demonstration id.
    #[arg(long)]
    pub chain: Option<String>,
    /// Split the demonstration at its stored keypoints.
    #[arg(long)]
    pub segment_keypoints: bool,
    /// Frame per segment, comma separated: `world` or `object:<id>`.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<String>>,
    /// Object whose motion the constraint regions follow at rollout time.
    #[arg(long)]
    pub constraints_follow_object: Option<String>,
    #[arg(long = "n")]
    pub n_basis: Option<usize>,
    #[arg(long)]
    pub no_gate: bool,
    #[command(flatten)]
    pub solver: SolverFlags,
}

/// Overrides on top of the workspace's default solver settings.
#[derive(Debug, Default, Args)]
pub struct SolverFlags {
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub collocation_dt: Option<f64>,
    #[arg(long)]
    pub horizon_factor: Option<f64>,
    #[arg(long)]
    pub max_outer_iterations: Option<usize>,
    #[arg(long)]
    pub max_inner_iterations: Option<usize>,
    #[arg(long)]
    pub penalty_init: Option<f64>,
    #[arg(long)]
    pub penalty_growth: Option<f64>,
    #[arg(long)]
    pub feasibility_tol: Option<f64>,
    #[arg(long)]
    pub gradient_tol: Option<f64>,
    /// Seconds.
    #[arg(long)]
    pub time_budget: Option<f64>,
    #[arg(long)]
    pub no_refine: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub chain: String,
    /// Translate a stored object for this rollout only: ID DX DY DZ.
    #[arg(long, num_args = 4, value_names = ["ID", "DX", "DY", "DZ"], action = clap::ArgAction::Append)]
    pub move_object: Vec<String>,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    pub start: Option<Vec<f64>>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the rollout as JSON instead of CSV.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub chain: String,
    #[arg(long, default_value_t = 0.001)]
    pub fine_dt: f64,
    /// Meters.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// Failure carrying a stable code; the message printed is `error[code]: ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit: i32,
}

impl CliError {
    fn domain(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.to_string(), message: message.into(), exit: EXIT_DOMAIN }
    }

    fn usage(message: impl Into<String>) -> Self {
        CliError { code: "bad_request".into(), message: message.into(), exit: EXIT_USAGE }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::domain(e.code(), e.to_string())
            }
        }
    )*};
}
domain_from!(WorkspaceError, PipelineError, DmpError, GeometryError);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::domain("io_error", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::domain("internal", e.to_string())
    }
}

/// Parse `args` and run. Output goes to `out`, diagnostics to `err`; the
/// return value is the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit
        }
    }
}

fn vec3(v: &[f64]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

fn quat(q: &Option<Vec<f64>>) -> Result<UnitQuat, CliError> {
    match q {
        None => Ok(UnitQuat::IDENTITY),
        Some(q) => Ok(UnitQuat::new(q[0], q[1], q[2], q[3])?),
    }
}

/// Apply one mutation to the workspace file, keeping the previous contents
/// in a `.bak` sibling.
fn edit(path: &Path, cmd: Mutation) -> Result<Vec<String>, CliError> {
    let ws = load(path)?;
    let m = mutate(&ws, cmd)?;
    write_back(path, &m.workspace)?;
    Ok(m.removed)
}

pub fn backup_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".bak");
    PathBuf::from(name)
}

fn write_back(path: &Path, ws: &Workspace) -> Result<(), CliError> {
    fs::copy(path, backup_path(path))?;
    save(ws, path)?;
    Ok(())
}

fn print_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = to_canonical_string(value)?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn execute(cmd: Cmd, out: &mut dyn Write) -> Result<i32, CliError> {
    match cmd {
        Cmd::DemoSynth(a) => {
            let id = a.id.unwrap_or_else(|| a.kind.to_possible_value().unwrap().get_name().to_string());
            let demo = match a.kind {
                DemoKind::MinjerkLine => synth::minjerk_line(&id, Vec3::ZERO, Vec3::X, a.duration, a.dt)?,
                DemoKind::Arc => synth::arc(&id, Vec3::ZERO, 0.25, a.duration, a.dt)?,
                DemoKind::PegInsert => synth::peg_insert(&id, a.duration, a.dt)?,
            };
            let text = to_canonical_string(&demo)?;
            fs::write(&a.out, format!("{text}\n"))?;
            writeln!(out, "wrote {} ({} samples)", a.out.display(), demo.samples().len())?;
        }
        Cmd::Init(a) => {
            if a.workspace.exists() && !a.force {
                return Err(CliError::domain(
                    "duplicate_id",
                    format!("{} exists; pass --force to overwrite", a.workspace.display()),
                ));
            }
            let id = match a.id {
                Some(id) => id,
                None => default_id(&a.workspace),
            };
            save(&Workspace::new(id), &a.workspace)?;
            writeln!(out, "created {}", a.workspace.display())?;
        }
        Cmd::AddDemo(a) => {
            let bytes = fs::read(&a.file)?;
            let demo: Demonstration = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::domain("invalid_demonstration", format!("{}: {e}", a.file.display())))?;
            let ws = load(&a.workspace)?;
            let cmd = if ws.demonstrations.contains_key(demo.id()) {
                Mutation::UpdateDemonstration { demonstration: demo }
            } else {
                Mutation::AddDemonstration { demonstration: demo }
            };
            report_removed(out, edit(&a.workspace, cmd)?)?;
        }
        Cmd::AddSphere(a) => {
            let shape = Shape::Sphere { center: vec3(&a.center), radius: a.radius };
            put_constraint(&a.workspace, a.id, shape, a.margin, out)?;
        }
        Cmd::AddBox(a) => {
            let pose = Pose::new(quat(&a.quat)?, vec3(&a.center));
            let shape = Shape::Box { pose, half_extents: vec3(&a.half_extents) };
            put_constraint(&a.workspace, a.id, shape, a.margin, out)?;
        }
        Cmd::AddObject(a) => {
            let pose = Pose::new(quat(&a.quat)?, vec3(&a.position));
            let ws = load(&a.workspace)?;
            let object = match ws.objects.get(&a.id) {
                Some(existing) => SceneObject { pose, ..existing.clone() },
                None => SceneObject::new(a.id, pose),
            };
            let cmd = if ws.objects.contains_key(&object.id) {
                Mutation::UpdateObject { object }
            } else {
                Mutation::AddObject { object }
            };
            report_removed(out, edit(&a.workspace, cmd)?)?;
        }
        Cmd::AddKeypoint(a) => {
            let ws = load(&a.workspace)?;
            let mut keypoints = ws.keypoints.get(&a.demo).cloned().unwrap_or_default();
            keypoints.push(Keypoint::new(a.time, a.label));
            keypoints.sort_by(|x, y| x.time.total_cmp(&y.time));
            report_removed(out, edit(&a.workspace, Mutation::SetKeypoints { demo_id: a.demo, keypoints })?)?;
        }
        Cmd::Fit(a) => {
            let ws = load(&a.workspace)?;
            let req = fit_request(&a);
            let result = pipeline::fit(&ws, &req)?;
            if a.json {
                print_json(out, &result)?;
            } else {
                writeln!(out, "rmse {}", format_f64(result.rmse))?;
                writeln!(out, "path_length {}", format_f64(result.path_length))?;
            }
        }
        Cmd::Solve(a) => {
            let ws = load(&a.workspace)?;
            let req = solve_request(&ws, &a)?;
            let (next, result) = pipeline::solve(&ws, &req)?;
            write_back(&a.workspace, &next)?;
            print_json(out, &result)?;
            if !result.converged {
                return Err(CliError::domain(
                    "infeasible",
                    format!("chain `{}` did not converge; best iterate saved", result.chain_id),
                ));
            }
        }
        Cmd::Rollout(a) => {
            let ws = load(&a.workspace)?;
            let req = rollout_request(&ws, &a)?;
            if a.json {
                print_json(out, &pipeline::rollout_what_if(&ws, &req)?)?;
            } else {
                let csv = pipeline::export_csv(&ws, &req)?;
                match &a.out {
                    Some(path) => {
                        fs::write(path, &csv)?;
                        writeln!(out, "wrote {} ({} rows)", path.display(), csv.lines().count().saturating_sub(1))?;
                    }
                    None => write!(out, "{csv}")?,
                }
            }
        }
        Cmd::Verify(a) => {
            let ws = load(&a.workspace)?;
            let result = pipeline::verify_chain(&ws, &a.chain, a.fine_dt, a.tol)?;
            print_json(out, &result)?;
            return Ok(if result.ok { EXIT_OK } else { EXIT_DOMAIN });
        }
        Cmd::Serve(config) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cdmp_service::run(config)).map_err(|e| CliError::domain("io_error", e))?;
        }
    }
    Ok(EXIT_OK)
}

fn default_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("workspace");
    let stem = name.strip_suffix(cdmp_core::workspace::FILE_EXTENSION).unwrap_or(name);
    let stem = stem.strip_suffix(".json").unwrap_or(stem);
    if stem.is_empty() { "workspace".into() } else { stem.to_string() }
}

fn report_removed(out: &mut dyn Write, removed: Vec<String>) -> Result<(), CliError> {
    for r in removed {
        writeln!(out, "removed {r}")?;
    }
    Ok(())
}

fn put_constraint(path: &Path, id: String, shape: Shape, margin: f64, out: &mut dyn Write) -> Result<(), CliError> {
    let ws = load(path)?;
    let cmd = if ws.constraint(&id).is_some() {
        Mutation::UpdateConstraint { id, shape, margin }
    } else {
        Mutation::AddConstraint { id, shape, margin }
    };
    report_removed(out, edit(path, cmd)?)
}

pub fn fit_request(a: &FitArgs) -> FitRequest {
    FitRequest { demo_id: a.demo.clone(), n_basis: Some(a.n_basis), gains: None, gate_forcing: Some(!a.no_gate) }
}

pub fn solve_request(ws: &Workspace, a: &SolveArgs) -> Result<SolveRequest, CliError> {
    let mut opts = ws.default_params.solve.clone();
    let f = &a.solver;
    if let Some(v) = f.dt {
        opts.dt = v;
    }
    if f.collocation_dt.is_some() {
        opts.collocation_dt = f.collocation_dt;
    }
    if let Some(v) = f.horizon_factor {
        opts.horizon_factor = v;
    }
    if let Some(v) = f.max_outer_iterations {
        opts.max_outer_iterations = v;
    }
    if let Some(v) = f.max_inner_iterations {
        opts.max_inner_iterations = v;
    }
    if let Some(v) = f.penalty_init {
        opts.penalty_init = v;
    }
    if let Some(v) = f.penalty_growth {
        opts.penalty_growth = v;
    }
    if let Some(v) = f.feasibility_tol {
        opts.feasibility_tol = v;
    }
    if let Some(v) = f.gradient_tol {
        opts.gradient_tol = v;
    }
    if let Some(v) = f.time_budget {
        opts.time_budget = v;
    }
    if f.no_refine {
        opts.refine = false;
    }
    let segments = match &a.frames {
        None => None,
        Some(frames) => Some(
            frames
                .iter()
                .map(|s| s.parse::<FrameRef>().map(SegmentSpec::in_frame))
                .collect::<Result<Vec<_>, _>>()
                .map_err(CliError::usage)?,
        ),
    };
    Ok(SolveRequest {
        demo_id: a.demo.clone(),
        chain_id: a.chain.clone(),
        segment_keypoints: a.segment_keypoints,
        segments,
        constraints_follow_object: a.constraints_follow_object.clone(),
        n_basis: a.n_basis,
        gate_forcing: a.no_gate.then_some(false),
        options: Some(opts),
    })
}

pub fn rollout_request(ws: &Workspace, a: &RolloutArgs) -> Result<RolloutRequest, CliError> {
    let mut req = RolloutRequest { chain_id: a.chain.clone(), start: a.start.as_deref().map(vec3), dt: a.dt, ..Default::default() };
    for m in a.move_object.chunks(4) {
        let id = &m[0];
        let delta: Vec<f64> = m[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::usage(format!("--move-object {id}: offsets must be numbers")))?;
        let base = match req.object_poses.get(id) {
            Some(p) => *p,
            None => {
                ws.objects
                    .get(id)
                    .ok_or_else(|| CliError::domain("not_found", format!("object `{id}` not found")))?
                    .pose
            }
        };
        req.object_poses.insert(id.clone(), Pose::new(base.rotation, base.translation + vec3(&delta)));
    }
    Ok(req)
}
