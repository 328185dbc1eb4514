//! Constrained DMPs: perturbation weights `zeta` chosen so that the rollout
//! keeps every signed-distance constraint.
//!
//! The transformation system is linear in `(z, y)` and the forcing term is
//! affine in `zeta`, so on any time grid `y(t; zeta) = y_nom(t) - Phi(t) zeta`
//! per axis, where column `k` of `Phi` is the response of the system started
//! at rest to a unit weight on basis `k`. The solver works entirely on this
//! affine map:
//!
//! ```text
//! minimize    1/2 |zeta|^2
//! subject to  sdf_j(y(t_k; zeta)) >= margin_j    for every collocation t_k, region j
//! ```
//!
//! using an augmented Lagrangian with hinge (PHR) terms and gradient descent
//! with Armijo backtracking for the inner problems. A converged answer is
//! re-checked by a fine rollout between collocation points.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmp::{rollout, Dmp, DmpError, RolloutOverrides, Trajectory, Zeta};
use crate::geometry::{sdf, sdf_with_gradient, ConstraintRegion, Vec3};

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK_FACTOR: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Lateral displacement used to break exact symmetry at the first iterate.
const SEED_DISPLACEMENT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("infeasible: max violation {:.3e} m after {} iterations", .best.report.max_violation.max(.best.report.fine_check_violation), .best.report.iterations)]
    Infeasible { best: Box<Cdmp> },
    #[error("degenerate problem: {endpoint} lies inside the margin of region `{region_id}`")]
    DegenerateProblem { region_id: String, endpoint: String },
    #[error("invalid solve options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Dmp(#[from] DmpError),
}

impl SolveError {
    pub fn code(&self) -> &'static str {
        match self {
            SolveError::Infeasible { .. } => "infeasible",
            SolveError::DegenerateProblem { .. } => "degenerate_problem",
            SolveError::InvalidOptions(_) => "invalid_options",
            SolveError::Dmp(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Rollout step.
    pub dt: f64,
    /// Spacing of the constraint grid; defaults to `2 * dt`.
    pub collocation_dt: Option<f64>,
    /// Rollout horizon as a multiple of the movement duration.
    pub horizon_factor: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    /// Meters.
    pub feasibility_tol: f64,
    pub gradient_tol: f64,
    /// Seconds of wall time before the solver returns its best iterate.
    pub time_budget: f64,
    /// Re-solve once with the violating fine-grid times added.
    pub refine: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            dt: 0.01,
            collocation_dt: None,
            horizon_factor: 1.25,
            max_outer_iterations: 30,
            max_inner_iterations: 200,
            penalty_init: 10.0,
            penalty_growth: 5.0,
            feasibility_tol: 1e-4,
            gradient_tol: 1e-6,
            time_budget: 10.0,
            refine: true,
        }
    }
}

impl SolveOptions {
    pub fn collocation_step(&self) -> f64 {
        self.collocation_dt.unwrap_or(2.0 * self.dt)
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let reals = [
            ("dt", self.dt),
            ("collocation_dt", self.collocation_step()),
            ("horizon_factor", self.horizon_factor),
            ("penalty_init", self.penalty_init),
            ("feasibility_tol", self.feasibility_tol),
            ("gradient_tol", self.gradient_tol),
            ("time_budget", self.time_budget),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(SolveError::InvalidOptions(format!("{name} must be positive, got {v}")));
            }
        }
        if self.horizon_factor < 1.0 {
            return Err(SolveError::InvalidOptions("horizon_factor must be >= 1".into()));
        }
        if !(self.penalty_growth.is_finite() && self.penalty_growth > 1.0) {
            return Err(SolveError::InvalidOptions("penalty_growth must be > 1".into()));
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return Err(SolveError::InvalidOptions("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Inner (gradient) iterations across all outer iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    /// `1/2 |zeta|^2`.
    pub objective: f64,
    /// Worst `margin - sdf` over the collocation grid, clamped at 0.
    pub max_violation: f64,
    /// Worst `margin - sdf` found by the last fine-grid check.
    pub fine_check_violation: f64,
    pub wall_time: f64,
    /// Collocation violation after each accepted outer iteration.
    #[serde(default)]
    pub violation_history: Vec<f64>,
    /// Same as `violation_history` for the pass run after fine-grid points
    /// were added; empty when no refinement happened.
    #[serde(default)]
    pub refinement_history: Vec<f64>,
    #[serde(default)]
    pub collocation_points: usize,
    #[serde(default)]
    pub refined_points: usize,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl SolveReport {
    fn trivial(notes: Vec<String>) -> Self {
        SolveReport {
            converged: true,
            iterations: 0,
            outer_iterations: 0,
            objective: 0.0,
            max_violation: 0.0,
            fine_check_violation: 0.0,
            wall_time: 0.0,
            violation_history: Vec::new(),
            refinement_history: Vec::new(),
            collocation_points: 0,
            refined_points: 0,
            notes,
        }
    }
}

/// A fitted primitive together with its constraint perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cdmp {
    pub dmp: Dmp,
    pub zeta: Zeta,
    pub constraints: Vec<ConstraintRegion>,
    pub report: SolveReport,
    /// Rollout step and horizon the constraints were enforced over.
    pub dt: f64,
    pub horizon: f64,
}

impl Cdmp {
    /// An unconstrained wrapper: `zeta = 0`.
    pub fn unconstrained(dmp: Dmp, dt: f64, horizon: f64) -> Cdmp {
        let n = dmp.n_basis();
        let notes = initial_velocity_note(&dmp).into_iter().collect();
        Cdmp {
            dmp,
            zeta: crate::dmp::zero_zeta(n),
            constraints: Vec::new(),
            report: SolveReport::trivial(notes),
            dt,
            horizon,
        }
    }

    pub fn rollout(&self, overrides: &RolloutOverrides, dt: f64, horizon: f64) -> Result<Trajectory, DmpError> {
        rollout(&self.dmp, Some(&self.zeta), overrides, dt, horizon)
    }

    pub fn zeta_norm(&self) -> f64 {
        self.zeta.iter().flatten().map(|z| z * z).sum::<f64>().sqrt()
    }
}

fn initial_velocity_note(dmp: &Dmp) -> Option<String> {
    let v = dmp.initial_z() * (1.0 / dmp.canonical.tau);
    (v.norm() > 1e-3).then(|| {
        format!(
            "demonstration starts in motion; initial velocity ({:.6}, {:.6}, {:.6}) m/s taken from the first finite difference",
            v.x, v.y, v.z
        )
    })
}

/// Unit-weight responses on the rollout lattice: `rows[i][d][k]` is the
/// displacement of axis `d` at step `i` caused by `zeta_{d,k} = -1`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub dt: f64,
    pub rows: Vec<[Vec<f64>; 3]>,
}

impl InfluenceMatrix {
    pub fn compute(dmp: &Dmp, dt: f64, horizon: f64) -> Result<Self, DmpError> {
        let n = dmp.n_basis();
        let mut unit = dmp.clone();
        unit.orientations.clear();
        for d in &mut unit.dims {
            d.y0 = 0.0;
            d.g = 0.0;
            d.z0 = 0.0;
        }
        let mut rows: Vec<[Vec<f64>; 3]> = Vec::new();
        for k in 0..n {
            for d in &mut unit.dims {
                d.w.iter_mut().enumerate().for_each(|(j, w)| *w = if j == k { 1.0 } else { 0.0 });
            }
            let tr = rollout(&unit, None, &RolloutOverrides::default(), dt, horizon)?;
            if rows.is_empty() {
                rows = vec![[vec![0.0; n], vec![0.0; n], vec![0.0; n]]; tr.states.len()];
            }
            for (row, st) in rows.iter_mut().zip(&tr.states) {
                for axis in 0..3 {
                    row[axis][k] = st.y.get(axis);
                }
            }
        }
        Ok(InfluenceMatrix { dt, rows })
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = (t / self.dt).round();
        ((i * self.dt - t).abs() <= 1e-9 && i >= 0.0 && (i as usize) < self.rows.len()).then_some(i as usize)
    }

    /// `y_nom - Phi zeta` at lattice index `i`.
    pub fn apply(&self, i: usize, nominal: Vec3, zeta: &Zeta) -> Vec3 {
        let mut y = nominal;
        for axis in 0..3 {
            let dot: f64 = self.rows[i][axis].iter().zip(&zeta[axis]).map(|(p, z)| p * z).sum();
            y.set(axis, y.get(axis) - dot);
        }
        y
    }
}

/// Per-axis `|grid| x n` influence matrices on the rollout lattice of `dt`.
pub fn influence_matrix(
    dmp: &Dmp,
    dt: f64,
    horizon: f64,
    grid: &[f64],
) -> Result<[Vec<Vec<f64>>; 3], DmpError> {
    let full = InfluenceMatrix::compute(dmp, dt, horizon)?;
    let idx = grid
        .iter()
        .map(|t| {
            full.index_of(*t).ok_or_else(|| {
                DmpError::InvalidParameter(format!("grid time {t} is not on the dt = {dt} lattice within the horizon"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(std::array::from_fn(|axis| idx.iter().map(|i| full.rows[*i][axis].clone()).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: f64,
    pub region_id: String,
    /// `margin - sdf`, strictly positive.
    pub violation: f64,
}

pub fn evaluate_violations(traj: &Trajectory, constraints: &[ConstraintRegion]) -> Vec<Violation> {
    let mut out = Vec::new();
    for st in &traj.states {
        for r in constraints {
            let c = sdf(r, st.y) - r.margin();
            if c < 0.0 {
                out.push(Violation { t: st.t, region_id: r.id().to_string(), violation: -c });
            }
        }
    }
    out
}

fn max_violation_of(traj: &Trajectory, constraints: &[ConstraintRegion]) -> f64 {
    evaluate_violations(traj, constraints).iter().map(|v| v.violation).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
struct CollocationPoint {
    nominal: Vec3,
    phi: [Vec<f64>; 3],
    /// Inverse norm of the influence rows; the penalty sees `c * scale`,
    /// whose gradient in `zeta` has unit size.
    scale: f64,
}

impl CollocationPoint {
    fn new(nominal: Vec3, phi: [Vec<f64>; 3]) -> Self {
        let n2: f64 = phi.iter().flatten().map(|p| p * p).sum();
        let scale = if n2 > 1e-24 { 1.0 / n2.sqrt() } else { 1.0 };
        CollocationPoint { nominal, phi, scale }
    }
}

/// The collocated constraint problem over flattened `zeta` (axis-major).
#[derive(Debug, Clone)]
pub struct ConstraintProblem {
    n: usize,
    points: Vec<CollocationPoint>,
    regions: Vec<ConstraintRegion>,
}

impl ConstraintProblem {
    pub fn new(dmp: &Dmp, constraints: &[ConstraintRegion], opts: &SolveOptions) -> Result<Self, SolveError> {
        opts.validate()?;
        let horizon = dmp.duration * opts.horizon_factor;
        let nominal = rollout(dmp, None, &RolloutOverrides::default(), opts.dt, horizon)?;
        let phi = InfluenceMatrix::compute(dmp, opts.dt, horizon)?;
        let stride = ((opts.collocation_step() / opts.dt).round() as usize).max(1);
        let last = nominal.states.len() - 1;
        let mut indices: Vec<usize> = (0..=last).step_by(stride).collect();
        if *indices.last().unwrap() != last {
            indices.push(last);
        }
        let points = indices
            .into_iter()
            .map(|i| CollocationPoint::new(nominal.states[i].y, phi.rows[i].clone()))
            .collect();
        Ok(ConstraintProblem { n: dmp.n_basis(), points, regions: constraints.to_vec() })
    }

    pub fn dimension(&self) -> usize {
        3 * self.n
    }

    pub fn num_constraints(&self) -> usize {
        self.points.len() * self.regions.len()
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    fn position(&self, p: &CollocationPoint, zeta: &[f64]) -> Vec3 {
        let mut y = p.nominal;
        for axis in 0..3 {
            let z = &zeta[axis * self.n..(axis + 1) * self.n];
            let dot: f64 = p.phi[axis].iter().zip(z).map(|(a, b)| a * b).sum();
            y.set(axis, y.get(axis) - dot);
        }
        y
    }

    /// `sdf - margin` for every (point, region), point-major.
    pub fn constraint_values(&self, zeta: &[f64]) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.num_constraints());
        for p in &self.points {
            let y = self.position(p, zeta);
            c.extend(self.regions.iter().map(|r| sdf(r, y) - r.margin()));
        }
        c
    }

    pub fn max_violation(&self, zeta: &[f64]) -> f64 {
        self.constraint_values(zeta).into_iter().fold(0.0, |m, c| m.max(-c))
    }

    /// Scaled constraint values `c_i * scale_i`, the quantities the
    /// multipliers and penalty act on.
    pub fn scaled_constraint_values(&self, zeta: &[f64]) -> Vec<f64> {
        let m = self.regions.len();
        let mut c = self.constraint_values(zeta);
        for (i, ci) in c.iter_mut().enumerate() {
            *ci *= self.points[i / m].scale;
        }
        c
    }

    /// Augmented Lagrangian with PHR hinge terms and its gradient:
    /// `1/2|zeta|^2 + sum_i (max(0, lambda_i - rho c_i)^2 - lambda_i^2) / (2 rho)`
    /// over the scaled constraints `c_i`.
    pub fn lagrangian(&self, zeta: &[f64], lambda: &[f64], rho: f64) -> (f64, Vec<f64>) {
        let mut value = 0.5 * zeta.iter().map(|z| z * z).sum::<f64>();
        let mut grad = zeta.to_vec();
        let m = self.regions.len();
        for (pi, p) in self.points.iter().enumerate() {
            let y = self.position(p, zeta);
            for (ri, r) in self.regions.iter().enumerate() {
                let lam = lambda[pi * m + ri];
                let (d, g) = sdf_with_gradient(r, y);
                let c = (d - r.margin()) * p.scale;
                let mu = (lam - rho * c).max(0.0);
                value += (mu * mu - lam * lam) / (2.0 * rho);
                if mu > 0.0 {
                    // dc/dzeta_{a,k} = scale * grad_a * (-phi_{a,k}); the term contributes -mu * dc.
                    for axis in 0..3 {
                        let ga = mu * p.scale * g.get(axis);
                        if ga != 0.0 {
                            for (gk, ph) in grad[axis * self.n..(axis + 1) * self.n].iter_mut().zip(&p.phi[axis]) {
                                *gk += ga * ph;
                            }
                        }
                    }
                }
            }
        }
        (value, grad)
    }

    fn add_points(&mut self, extra: Vec<CollocationPoint>) {
        self.points.extend(extra);
    }

    /// Small displacement perpendicular to the motion at the worst point, used
    /// as the first iterate when the nominal path is infeasible.
    fn symmetry_seed(&self) -> Vec<f64> {
        let zero = vec![0.0; self.dimension()];
        let c = self.constraint_values(&zero);
        let m = self.regions.len();
        let Some((worst, _)) = c.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) else {
            return zero;
        };
        let (pi, ri) = (worst / m, worst % m);
        let p = &self.points[pi];
        let (_, normal) = sdf_with_gradient(&self.regions[ri], p.nominal);
        let prev = &self.points[pi.saturating_sub(1)];
        let next = &self.points[(pi + 1).min(self.points.len() - 1)];
        let motion = next.nominal - prev.nominal;
        let dir = if motion.norm() > 1e-12 {
            let v = motion * (1.0 / motion.norm());
            let lateral = normal - v * normal.dot(v);
            if lateral.norm() > 1e-6 {
                lateral
            } else {
                let axis = (0..3)
                    .min_by(|a, b| v.get(*a).abs().total_cmp(&v.get(*b).abs()))
                    .expect("three axes");
                let mut e = Vec3::ZERO;
                e.set(axis, 1.0);
                e - v * e.dot(v)
            }
        } else {
            normal
        };
        let dir = dir * (1.0 / dir.norm());
        let mut seed = zero;
        for axis in 0..3 {
            let phi = &p.phi[axis];
            let nrm2: f64 = phi.iter().map(|x| x * x).sum();
            if nrm2 > 0.0 {
                // -phi . zeta = displacement along this axis
                let k = -SEED_DISPLACEMENT * dir.get(axis) / nrm2;
                for (s, ph) in seed[axis * self.n..(axis + 1) * self.n].iter_mut().zip(phi) {
                    *s = k * ph;
                }
            }
        }
        seed
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct InnerResult {
    zeta: Vec<f64>,
    iterations: usize,
    stationary: bool,
    out_of_time: bool,
}

/// Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.
fn minimize_inner(
    problem: &ConstraintProblem,
    start: &[f64],
    lambda: &[f64],
    rho: f64,
    opts: &SolveOptions,
    clock: &Instant,
) -> InnerResult {
    let mut zeta = start.to_vec();
    let (mut f, mut g) = problem.lagrangian(&zeta, lambda, rho);
    let mut step = 1.0;
    let mut iterations = 0;
    loop {
        let gn = norm(&g);
        if gn <= opts.gradient_tol * norm(&zeta).max(1.0) {
            return InnerResult { zeta, iterations, stationary: true, out_of_time: false };
        }
        if iterations >= opts.max_inner_iterations {
            return InnerResult { zeta, iterations, stationary: false, out_of_time: false };
        }
        if clock.elapsed().as_secs_f64() > opts.time_budget {
            return InnerResult { zeta, iterations, stationary: false, out_of_time: true };
        }
        iterations += 1;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = zeta.iter().zip(&g).map(|(z, d)| z - step * d).collect();
            let (ft, gt) = problem.lagrangian(&trial, lambda, rho);
            if ft <= f - ARMIJO_C1 * step * gn * gn {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= BACKTRACK_FACTOR;
        }
        let Some((trial, ft, gt)) = accepted else {
            // no descent possible at machine precision
            return InnerResult { zeta, iterations, stationary: true, out_of_time: false };
        };
        let s: Vec<f64> = trial.iter().zip(&zeta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (step * 2.0).min(1e12) };
        zeta = trial;
        f = ft;
        g = gt;
    }
}

fn unflatten(n: usize, v: &[f64]) -> Zeta {
    std::array::from_fn(|axis| v[axis * n..(axis + 1) * n].to_vec())
}

struct OuterState {
    zeta: Vec<f64>,
    lambda: Vec<f64>,
    rho: f64,
    violation: f64,
    iterations: usize,
    outer: usize,
    history: Vec<f64>,
    out_of_time: bool,
}

fn run_outer(problem: &ConstraintProblem, st: &mut OuterState, opts: &SolveOptions, clock: &Instant) {
    for _ in 0..opts.max_outer_iterations {
        if clock.elapsed().as_secs_f64() > opts.time_budget {
            st.out_of_time = true;
            return;
        }
        st.outer += 1;
        let inner = minimize_inner(problem, &st.zeta, &st.lambda, st.rho, opts, clock);
        st.iterations += inner.iterations;
        let violation = problem.max_violation(&inner.zeta);
        let c = problem.scaled_constraint_values(&inner.zeta);
        if violation > st.violation {
            // keep the accepted iterate; a stiffer penalty gives a less violating inner solution
            st.rho *= opts.penalty_growth;
        } else {
            for (l, ci) in st.lambda.iter_mut().zip(&c) {
                *l = (*l - st.rho * ci).max(0.0);
            }
            if violation > opts.feasibility_tol && violation > 0.25 * st.violation {
                st.rho *= opts.penalty_growth;
            }
            st.zeta = inner.zeta;
            st.violation = violation;
            st.history.push(violation);
            if violation <= opts.feasibility_tol && inner.stationary {
                return;
            }
        }
        if inner.out_of_time {
            st.out_of_time = true;
            return;
        }
    }
}

/// Fine-lattice points that violate or lie within half a collocation step's
/// travel of an inflated surface; the coarse grid cannot see between them.
fn fine_points(
    dmp: &Dmp,
    zeta: &Zeta,
    constraints: &[ConstraintRegion],
    fine_dt: f64,
    collocation_dt: f64,
    horizon: f64,
) -> Result<Vec<CollocationPoint>, DmpError> {
    let traj = rollout(dmp, Some(zeta), &RolloutOverrides::default(), fine_dt, horizon)?;
    let max_speed = traj.states.iter().map(|s| s.v.norm()).fold(0.0, f64::max);
    let band = 0.5 * max_speed * collocation_dt;
    let clearance = |p: Vec3| constraints.iter().map(|r| sdf(r, p) - r.margin()).fold(f64::INFINITY, f64::min);
    if traj.states.iter().all(|s| clearance(s.y) >= 0.0) {
        return Ok(Vec::new());
    }
    let near: Vec<usize> = (0..traj.states.len()).filter(|&i| clearance(traj.states[i].y) < band).collect();
    let nominal = rollout(dmp, None, &RolloutOverrides::default(), fine_dt, horizon)?;
    let phi = InfluenceMatrix::compute(dmp, fine_dt, horizon)?;
    Ok(near
        .into_iter()
        .map(|i| CollocationPoint::new(nominal.states[i].y, phi.rows[i].clone()))
        .collect())
}

/// Solve for the smallest perturbation `zeta` keeping every region's margin.
pub fn solve(dmp: &Dmp, constraints: &[ConstraintRegion], opts: &SolveOptions) -> Result<Cdmp, SolveError> {
    let clock = Instant::now();
    opts.validate()?;
    dmp.validate()?;
    let horizon = dmp.duration * opts.horizon_factor;
    let n = dmp.n_basis();
    let mut notes: Vec<String> = initial_velocity_note(dmp).into_iter().collect();

    if constraints.is_empty() {
        let mut cdmp = Cdmp::unconstrained(dmp.clone(), opts.dt, horizon);
        cdmp.report.notes = notes;
        cdmp.report.wall_time = clock.elapsed().as_secs_f64();
        return Ok(cdmp);
    }

    for (endpoint, p) in [("start", dmp.start()), ("goal", dmp.goal())] {
        if let Some(r) = constraints.iter().find(|r| sdf(r, p) < r.margin()) {
            return Err(SolveError::DegenerateProblem { region_id: r.id().to_string(), endpoint: endpoint.into() });
        }
    }

    let mut problem = ConstraintProblem::new(dmp, constraints, opts)?;
    let zero = vec![0.0; problem.dimension()];
    let nominal_violation = problem.max_violation(&zero);
    let start = if nominal_violation > 0.0 { problem.symmetry_seed() } else { zero };
    let mut st = OuterState {
        violation: problem.max_violation(&start),
        zeta: start,
        lambda: vec![0.0; problem.num_constraints()],
        rho: opts.penalty_init,
        iterations: 0,
        outer: 0,
        history: Vec::new(),
        out_of_time: false,
    };
    st.history.push(st.violation);
    run_outer(&problem, &mut st, opts, &clock);

    let fine_dt = opts.dt / 4.0;
    let mut refined = 0;
    let history = std::mem::take(&mut st.history);
    let mut zeta = unflatten(n, &st.zeta);
    let mut fine = max_violation_of(&rollout(dmp, Some(&zeta), &RolloutOverrides::default(), fine_dt, horizon)?, constraints);
    if opts.refine && fine > opts.feasibility_tol && !st.out_of_time {
        let extra = fine_points(dmp, &zeta, constraints, fine_dt, opts.collocation_step(), horizon)?;
        refined = extra.len();
        problem.add_points(extra);
        st.lambda.resize(problem.num_constraints(), 0.0);
        st.violation = problem.max_violation(&st.zeta);
        st.history.push(st.violation);
        run_outer(&problem, &mut st, opts, &clock);
        zeta = unflatten(n, &st.zeta);
        fine = max_violation_of(&rollout(dmp, Some(&zeta), &RolloutOverrides::default(), fine_dt, horizon)?, constraints);
        notes.push(format!("refinement added {refined} fine-grid collocation points"));
    }
    if st.out_of_time {
        notes.push(format!("time budget of {} s exhausted", opts.time_budget));
    }

    let max_violation = problem.max_violation(&st.zeta);
    let converged = max_violation <= opts.feasibility_tol && fine <= opts.feasibility_tol;
    let report = SolveReport {
        converged,
        iterations: st.iterations,
        outer_iterations: st.outer,
        objective: 0.5 * st.zeta.iter().map(|z| z * z).sum::<f64>(),
        max_violation,
        fine_check_violation: fine,
        wall_time: clock.elapsed().as_secs_f64(),
        violation_history: history,
        refinement_history: st.history,
        collocation_points: problem.num_points(),
        refined_points: refined,
        notes,
    };
    let cdmp = Cdmp { dmp: dmp.clone(), zeta, constraints: constraints.to_vec(), report, dt: opts.dt, horizon };
    if converged {
        Ok(cdmp)
    } else {
        Err(SolveError::Infeasible { best: Box::new(cdmp) })
    }
}

/// Re-roll at `fine_dt` and report the worst margin violation.
pub fn verify(cdmp: &Cdmp, fine_dt: f64) -> Result<SolveReport, DmpError> {
    if !(fine_dt > 0.0 && fine_dt <= cdmp.dt * (1.0 + 1e-12)) {
        return Err(DmpError::InvalidParameter(format!(
            "fine_dt must be in (0, {}], got {fine_dt}",
            cdmp.dt
        )));
    }
    let traj = cdmp.rollout(&RolloutOverrides::default(), fine_dt, cdmp.horizon)?;
    let mut report = cdmp.report.clone();
    report.fine_check_violation = max_violation_of(&traj, &cdmp.constraints);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmp::{fit_lwr, FitOptions};
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_dmp(gated: bool) -> Dmp {
        let demo = synth::minjerk_line("line", Vec3::ZERO, Vec3::X, 2.0, 0.01).unwrap();
        fit_lwr(&demo, &FitOptions { gate_forcing: gated, ..FitOptions::default() }).unwrap()
    }

    fn sphere(r: f64) -> ConstraintRegion {
        ConstraintRegion::sphere("ball", Vec3::new(0.5, 0.0, 0.0), r, 0.02).unwrap()
    }

    #[test]
    fn influence_columns_reproduce_unit_rollouts() {
        let dmp = line_dmp(true);
        let horizon = 2.5;
        let full = InfluenceMatrix::compute(&dmp, 0.01, horizon).unwrap();
        let nominal = rollout(&dmp, None, &RolloutOverrides::default(), 0.01, horizon).unwrap();
        let n = dmp.n_basis();
        let mut zeta = crate::dmp::zero_zeta(n);
        for (i, st) in nominal.states.iter().enumerate() {
            assert_eq!(full.apply(i, st.y, &zeta), st.y);
        }
        for k in [0, 7, n - 1] {
            for axis in 0..3 {
                zeta[axis] = vec![0.0; n];
                zeta[axis][k] = 1.0;
            }
            let direct = rollout(&dmp, Some(&zeta), &RolloutOverrides::default(), 0.01, horizon).unwrap();
            for (i, (a, b)) in nominal.states.iter().zip(&direct.states).enumerate() {
                assert!((full.apply(i, a.y, &zeta) - b.y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn influence_matrix_on_grid() {
        let dmp = line_dmp(true);
        let m = influence_matrix(&dmp, 0.01, 2.5, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m[0].len(), 3);
        assert_eq!(m[0][0].len(), 30);
        assert!(m[0][0].iter().all(|v| *v == 0.0));
        assert!(influence_matrix(&dmp, 0.01, 2.5, &[0.005]).is_err());
        assert!(influence_matrix(&dmp, 0.01, 2.5, &[3.0]).is_err());
    }

    #[test]
    fn affine_map_matches_direct_rollouts() {
        let dmp = line_dmp(true);
        let horizon = 2.5;
        let full = InfluenceMatrix::compute(&dmp, 0.01, horizon).unwrap();
        let nominal = rollout(&dmp, None, &RolloutOverrides::default(), 0.01, horizon).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut zeta: Zeta = std::array::from_fn(|_| (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let nrm = zeta.iter().flatten().map(|z| z * z).sum::<f64>().sqrt();
            let scale = rng.gen_range(0.0..10.0) / nrm;
            zeta.iter_mut().flatten().for_each(|z| *z *= scale);
            let direct = rollout(&dmp, Some(&zeta), &RolloutOverrides::default(), 0.01, horizon).unwrap();
            for (i, (a, b)) in nominal.states.iter().zip(&direct.states).enumerate() {
                assert!((full.apply(i, a.y, &zeta) - b.y).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn violations_on_line_through_sphere() {
        let dmp = line_dmp(true);
        let tr = rollout(&dmp, None, &RolloutOverrides::default(), 0.01, 2.5).unwrap();
        assert!(evaluate_violations(&tr, &[]).is_empty());
        let far = ConstraintRegion::sphere("far", Vec3::new(0.5, 1.0, 0.0), 0.1, 0.0).unwrap();
        assert!(evaluate_violations(&tr, &[far]).is_empty());
        let ball = ConstraintRegion::sphere("ball", Vec3::new(0.5, 0.0, 0.0), 0.1, 0.0).unwrap();
        let v = evaluate_violations(&tr, &[ball]);
        let worst = v.iter().map(|v| v.violation).fold(0.0, f64::max);
        // peak speed of the 1 m / 2 s minimum-jerk line is 0.9375 m/s
        assert!((worst - 0.1).abs() <= 0.01 * 0.9375 + 1e-3, "{worst}");
        assert!(v.iter().all(|x| x.region_id == "ball" && x.violation > 0.0));
    }

    #[test]
    fn empty_constraints_give_exact_zero() {
        let c = solve(&line_dmp(true), &[], &SolveOptions::default()).unwrap();
        assert!(c.zeta.iter().flatten().all(|z| *z == 0.0));
        assert!(c.report.converged);
        assert_eq!(c.report.objective, 0.0);
        let v = verify(&c, 0.001).unwrap();
        assert_eq!(v.fine_check_violation, 0.0);
    }

    #[test]
    fn feasible_nominal_keeps_zero() {
        let dmp = line_dmp(true);
        let clear = ConstraintRegion::sphere("clear", Vec3::new(0.5, 0.2, 0.0), 0.17, 0.02).unwrap();
        let c = solve(&dmp, &[clear], &SolveOptions::default()).unwrap();
        assert!(c.report.converged);
        assert!(c.zeta.iter().flatten().all(|z| z.abs() < 1e-8));
    }

    #[test]
    fn line_through_sphere_is_solved() {
        let dmp = line_dmp(true);
        let c = solve(&dmp, &[sphere(0.15)], &SolveOptions::default()).unwrap();
        assert!(c.report.converged);
        assert!(c.report.objective > 0.0);
        let fine = verify(&c, c.dt / 8.0).unwrap();
        assert!(fine.fine_check_violation <= 1e-3, "{fine:?}");
        let tr = c.rollout(&RolloutOverrides::default(), c.dt, c.horizon).unwrap();
        assert!((tr.last().y - Vec3::X).norm() < 0.01);
        // feasibility dominance
        assert!(verify(&c, c.dt / 4.0).unwrap().fine_check_violation <= 1e-4);
        // outer loop never increases the collocation violation
        for h in [&c.report.violation_history, &c.report.refinement_history] {
            assert!(h.windows(2).all(|w| w[1] <= w[0]), "{h:?}");
        }
    }

    #[test]
    fn goal_inside_region_is_degenerate() {
        let dmp = line_dmp(true);
        let r = ConstraintRegion::sphere("g", Vec3::new(1.0, 0.0, 0.0), 0.1, 0.0).unwrap();
        let e = solve(&dmp, &[r], &SolveOptions::default()).unwrap_err();
        assert_eq!(e.code(), "degenerate_problem");
        assert!(matches!(e, SolveError::DegenerateProblem { ref endpoint, .. } if endpoint == "goal"));
    }

    #[test]
    fn coarse_grid_misses_thin_obstacle_but_verify_finds_it() {
        let dmp = line_dmp(true);
        let x = synth::minjerk_profile(0.45);
        let thin = ConstraintRegion::sphere("thin", Vec3::new(x, 0.005, 0.0), 0.02, 0.0).unwrap();
        let coarse = SolveOptions { collocation_dt: Some(0.2), refine: false, ..SolveOptions::default() };
        // the coarse grid sees nothing and keeps zeta = 0; the fine rollout does not
        let best = match solve(&dmp, std::slice::from_ref(&thin), &coarse) {
            Err(SolveError::Infeasible { best }) => best,
            other => panic!("expected the fine check to flag the solve, got {other:?}"),
        };
        assert_eq!(best.report.max_violation, 0.0);
        assert!(verify(&best, 0.001).unwrap().fine_check_violation > 0.01);
        // with refinement the same grid is repaired
        let refined = SolveOptions { collocation_dt: Some(0.2), ..SolveOptions::default() };
        let c = solve(&dmp, &[thin], &refined).unwrap();
        assert!(c.report.refined_points > 0);
        assert!(verify(&c, 0.0025).unwrap().fine_check_violation <= 1e-4);
    }

    #[test]
    fn lagrangian_gradient_matches_finite_differences() {
        let dmp = line_dmp(true);
        let regions = [sphere(0.15), ConstraintRegion::sphere("b2", Vec3::new(0.3, 0.05, 0.02), 0.08, 0.01).unwrap()];
        let p = ConstraintProblem::new(&dmp, &regions, &SolveOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let zeta: Vec<f64> = (0..p.dimension()).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let lambda: Vec<f64> = (0..p.num_constraints()).map(|_| rng.gen_range(0.0..50.0)).collect();
            let rho = rng.gen_range(1.0..1000.0);
            let (_, g) = p.lagrangian(&zeta, &lambda, rho);
            let h = 1e-6;
            let fd: Vec<f64> = (0..zeta.len())
                .map(|i| {
                    let mut a = zeta.clone();
                    let mut b = zeta.clone();
                    a[i] += h;
                    b[i] -= h;
                    (p.lagrangian(&a, &lambda, rho).0 - p.lagrangian(&b, &lambda, rho).0) / (2.0 * h)
                })
                .collect();
            let diff = norm(&g.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(diff / norm(&g).max(norm(&fd)) < 1e-5);
        }
    }

    #[test]
    fn options_validation() {
        let bad = SolveOptions { penalty_growth: 1.0, ..SolveOptions::default() };
        assert!(matches!(bad.validate(), Err(SolveError::InvalidOptions(_))));
        let bad = SolveOptions { dt: 0.0, ..SolveOptions::default() };
        assert!(bad.validate().is_err());
        let bad = SolveOptions { max_inner_iterations: 0, ..SolveOptions::default() };
        assert!(bad.validate().is_err());
    }
}
