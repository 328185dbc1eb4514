//! Discrete movement primitives: canonical phase, Gaussian basis, forcing
//! term, demonstration targets, locally weighted regression and RK4 rollout.
//!
//! The transformation system, per spatial axis, is
//!
//! ```text
//! tau * ds/dt = -alpha_s * s
//! tau * dz/dt = alpha_z * (beta_z * (g - y) - z) + f(s)
//! tau * dy/dt = z
//! ```
//!
//! with `f(s) = sum_i (w_i - zeta_i) psi_i(s) / sum_i psi_i(s)`, optionally
//! multiplied by `s` when forcing is gated. `zeta` is the perturbation found
//! by the constraint solver in [`crate::cdmp`]; it is zero for a plain DMP.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{FrameRef, UnitQuat, Vec3};

/// Ridge term protecting basis functions with near-zero total activation.
pub const LWR_RIDGE: f64 = 1e-10;
pub const MIN_DEMO_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DmpError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("phase requested at negative time {0}")]
    NegativeTime(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("demonstration too short: {len} samples (need at least {MIN_DEMO_SAMPLES})")]
    DemoTooShort { len: usize },
    #[error("timestamps not strictly increasing at sample {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("invalid demonstration: {0}")]
    InvalidDemonstration(String),
    #[error("degenerate demonstration: zero duration")]
    DegenerateDemonstration,
    #[error("non-finite state encountered at step {step}")]
    NonFiniteState { step: usize },
}

impl DmpError {
    pub fn code(&self) -> &'static str {
        match self {
            DmpError::InvalidParameter(_) => "invalid_parameter",
            DmpError::NegativeTime(_) => "negative_time",
            DmpError::DimensionMismatch { .. } => "dimension_mismatch",
            DmpError::DemoTooShort { .. } => "demo_too_short",
            DmpError::NonMonotonicTimestamps { .. } => "non_monotonic_timestamps",
            DmpError::InvalidDemonstration(_) => "invalid_demonstration",
            DmpError::DegenerateDemonstration => "degenerate_demonstration",
            DmpError::NonFiniteState { .. } => "non_finite_state",
        }
    }
}

fn positive(name: &str, v: f64) -> Result<f64, DmpError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(DmpError::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSystem {
    pub alpha_s: f64,
    pub tau: f64,
}

impl CanonicalSystem {
    pub fn new(alpha_s: f64, tau: f64) -> Result<Self, DmpError> {
        Ok(CanonicalSystem { alpha_s: positive("alpha_s", alpha_s)?, tau: positive("tau", tau)? })
    }

    pub fn phase(&self, t: f64) -> Result<f64, DmpError> {
        phase(self, t)
    }
}

/// `s(t) = exp(-alpha_s * t / tau)`.
pub fn phase(cs: &CanonicalSystem, t: f64) -> Result<f64, DmpError> {
    if t < 0.0 || t.is_nan() {
        return Err(DmpError::NegativeTime(t));
    }
    Ok((-cs.alpha_s * t / cs.tau).exp())
}

/// Gaussian kernels in phase space, `psi_i(s) = exp(-h_i (s - c_i)^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasis", into = "RawBasis")]
pub struct BasisSet {
    centers: Vec<f64>,
    widths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBasis {
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl TryFrom<RawBasis> for BasisSet {
    type Error = DmpError;
    fn try_from(r: RawBasis) -> Result<Self, Self::Error> {
        BasisSet::new(r.centers, r.widths)
    }
}

impl From<BasisSet> for RawBasis {
    fn from(b: BasisSet) -> Self {
        RawBasis { centers: b.centers, widths: b.widths }
    }
}

impl BasisSet {
    pub fn new(centers: Vec<f64>, widths: Vec<f64>) -> Result<Self, DmpError> {
        if centers.len() < 2 {
            return Err(DmpError::InvalidParameter("basis needs at least 2 centers".into()));
        }
        if centers.len() != widths.len() {
            return Err(DmpError::DimensionMismatch { expected: centers.len(), got: widths.len() });
        }
        if (centers[0] - 1.0).abs() > 1e-9 {
            return Err(DmpError::InvalidParameter("first basis center must be 1".into()));
        }
        if centers.windows(2).any(|c| !(c[1] < c[0])) || centers.iter().any(|c| !(*c > 0.0)) {
            return Err(DmpError::InvalidParameter(
                "basis centers must be strictly decreasing in (0, 1]".into(),
            ));
        }
        for h in &widths {
            positive("basis width", *h)?;
        }
        Ok(BasisSet { centers, widths })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// Unnormalized activations `psi_i(s)`.
    pub fn activations(&self, s: f64) -> Vec<f64> {
        self.centers
            .iter()
            .zip(&self.widths)
            .map(|(c, h)| (-h * (s - c) * (s - c)).exp())
            .collect()
    }

    /// Normalized activations `psi_i(s) / sum_j psi_j(s)`.
    pub fn eval(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(s, &mut out);
        out
    }

    fn eval_into(&self, s: f64, out: &mut [f64]) {
        // Shift exponents by their maximum so distant kernels cannot underflow the sum.
        let mut max_e = f64::NEG_INFINITY;
        for ((c, h), o) in self.centers.iter().zip(&self.widths).zip(out.iter_mut()) {
            *o = -h * (s - c) * (s - c);
            max_e = max_e.max(*o);
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max_e).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}

/// Centers equally spaced in time over `duration`; `h_i = 1 / (2 (c_{i+1} - c_i)^2)`.
pub fn default_basis(n: usize, cs: &CanonicalSystem, duration: f64) -> Result<BasisSet, DmpError> {
    if n < 2 {
        return Err(DmpError::InvalidParameter(format!("basis count must be >= 2, got {n}")));
    }
    positive("duration", duration)?;
    let centers = (0..n)
        .map(|i| phase(cs, i as f64 * duration / (n - 1) as f64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut widths: Vec<f64> = centers
        .windows(2)
        .map(|c| 1.0 / (2.0 * (c[1] - c[0]) * (c[1] - c[0])))
        .collect();
    widths.push(widths[n - 2]);
    BasisSet::new(centers, widths)
}

pub fn basis_eval(b: &BasisSet, s: f64) -> Vec<f64> {
    b.eval(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub alpha_z: f64,
    pub beta_z: f64,
    pub alpha_s: f64,
}

impl Default for Gains {
    /// Critically damped (`beta_z = alpha_z / 4`); the phase reaches 0.01 at `t = tau`.
    fn default() -> Self {
        Gains { alpha_z: 25.0, beta_z: 6.25, alpha_s: 4.6052 }
    }
}

impl Gains {
    pub fn validate(&self) -> Result<(), DmpError> {
        positive("alpha_z", self.alpha_z)?;
        positive("beta_z", self.beta_z)?;
        positive("alpha_s", self.alpha_s)?;
        Ok(())
    }
}

/// One spatial axis of the transformation system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpDim {
    pub alpha_z: f64,
    pub beta_z: f64,
    pub w: Vec<f64>,
    pub y0: f64,
    pub g: f64,
    /// Initial scaled velocity `z(0) = tau * dy/dt(0)`.
    #[serde(default)]
    pub z0: f64,
}

/// Per-axis perturbation weights; zero for an unconstrained primitive.
pub type Zeta = [Vec<f64>; 3];

pub fn zero_zeta(n: usize) -> Zeta {
    [vec![0.0; n], vec![0.0; n], vec![0.0; n]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dmp {
    pub canonical: CanonicalSystem,
    pub basis: BasisSet,
    pub dims: [DmpDim; 3],
    pub duration: f64,
    pub gate_forcing: bool,
    #[serde(default)]
    pub frame: FrameRef,
    /// Demonstrated orientation track, `(time, quaternion)`; carried through
    /// to rollouts by interpolation, never integrated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub orientations: Vec<(f64, UnitQuat)>,
}

impl Dmp {
    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn start(&self) -> Vec3 {
        Vec3::new(self.dims[0].y0, self.dims[1].y0, self.dims[2].y0)
    }

    pub fn goal(&self) -> Vec3 {
        Vec3::new(self.dims[0].g, self.dims[1].g, self.dims[2].g)
    }

    pub fn initial_z(&self) -> Vec3 {
        Vec3::new(self.dims[0].z0, self.dims[1].z0, self.dims[2].z0)
    }

    pub fn validate(&self) -> Result<(), DmpError> {
        positive("duration", self.duration)?;
        positive("alpha_s", self.canonical.alpha_s)?;
        positive("tau", self.canonical.tau)?;
        let n = self.n_basis();
        for d in &self.dims {
            positive("alpha_z", d.alpha_z)?;
            positive("beta_z", d.beta_z)?;
            if d.w.len() != n {
                return Err(DmpError::DimensionMismatch { expected: n, got: d.w.len() });
            }
            if !d.w.iter().all(|w| w.is_finite()) || !(d.y0.is_finite() && d.g.is_finite() && d.z0.is_finite()) {
                return Err(DmpError::InvalidParameter("non-finite DMP parameter".into()));
            }
        }
        Ok(())
    }

    pub fn forcing(&self, dim: usize, s: f64, zeta: &[f64]) -> Result<f64, DmpError> {
        forcing(self, dim, s, zeta)
    }

    fn orientation_at(&self, t: f64) -> Option<UnitQuat> {
        let track = &self.orientations;
        let first = track.first()?;
        if t <= first.0 {
            return Some(first.1);
        }
        let last = track.last()?;
        if t >= last.0 {
            return Some(last.1);
        }
        let i = track.partition_point(|(ti, _)| *ti <= t);
        let (t0, q0) = track[i - 1];
        let (t1, q1) = track[i];
        Some(q0.slerp(q1, (t - t0) / (t1 - t0)))
    }
}

/// `sum_i (w_i - zeta_i) psi_i(s) / sum_i psi_i(s)`, times `s` when gated.
pub fn forcing(dmp: &Dmp, dim: usize, s: f64, zeta: &[f64]) -> Result<f64, DmpError> {
    let n = dmp.n_basis();
    if zeta.len() != n {
        return Err(DmpError::DimensionMismatch { expected: n, got: zeta.len() });
    }
    let d = dmp.dims.get(dim).ok_or(DmpError::DimensionMismatch { expected: 3, got: dim + 1 })?;
    let psi = dmp.basis.eval(s);
    let f: f64 = psi.iter().zip(d.w.iter().zip(zeta)).map(|(p, (w, z))| (w - z) * p).sum();
    Ok(if dmp.gate_forcing { f * s } else { f })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoSample {
    pub t: f64,
    pub position: Vec3,
    pub orientation: Option<UnitQuat>,
}

impl DemoSample {
    pub fn new(t: f64, position: Vec3) -> Self {
        DemoSample { t, position, orientation: None }
    }
}

impl Serialize for DemoSample {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let p = self.position;
        match self.orientation {
            None => [self.t, p.x, p.y, p.z].serialize(ser),
            Some(q) => {
                let [qw, qx, qy, qz] = q.to_array();
                [self.t, p.x, p.y, p.z, qw, qx, qy, qz].serialize(ser)
            }
        }
    }
}

impl<'de> Deserialize<'de> for DemoSample {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let row = Vec::<f64>::deserialize(de)?;
        let position = match row.len() {
            4 | 8 => Vec3::new(row[1], row[2], row[3]),
            n => return Err(D::Error::custom(format!("sample row must have 4 or 8 values, got {n}"))),
        };
        let orientation = if row.len() == 8 {
            Some(UnitQuat::new(row[4], row[5], row[6], row[7]).map_err(D::Error::custom)?)
        } else {
            None
        };
        Ok(DemoSample { t: row[0], position, orientation })
    }
}

/// A timestamped end-effector path; raw samples as captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDemonstration", into = "RawDemonstration")]
pub struct Demonstration {
    id: String,
    frame: FrameRef,
    samples: Vec<DemoSample>,
}

#[derive(Serialize, Deserialize)]
struct RawDemonstration {
    id: String,
    #[serde(default)]
    frame: FrameRef,
    samples: Vec<DemoSample>,
}

impl TryFrom<RawDemonstration> for Demonstration {
    type Error = DmpError;
    fn try_from(r: RawDemonstration) -> Result<Self, Self::Error> {
        Demonstration::new(r.id, r.frame, r.samples)
    }
}

impl From<Demonstration> for RawDemonstration {
    fn from(d: Demonstration) -> Self {
        RawDemonstration { id: d.id, frame: d.frame, samples: d.samples }
    }
}

impl Demonstration {
    pub fn new(
        id: impl Into<String>,
        frame: FrameRef,
        samples: Vec<DemoSample>,
    ) -> Result<Self, DmpError> {
        let id = id.into();
        if id.is_empty() {
            return Err(DmpError::InvalidDemonstration("id must not be empty".into()));
        }
        if samples.len() < MIN_DEMO_SAMPLES {
            return Err(DmpError::DemoTooShort { len: samples.len() });
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || !s.position.is_finite() {
                return Err(DmpError::InvalidDemonstration(format!("sample {i} is not finite")));
            }
            if i > 0 && !(s.t > samples[i - 1].t) {
                return Err(DmpError::NonMonotonicTimestamps { index: i });
            }
        }
        Ok(Demonstration { id, frame, samples })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn frame(&self) -> &FrameRef {
        &self.frame
    }

    pub fn samples(&self) -> &[DemoSample] {
        &self.samples
    }

    pub fn start(&self) -> Vec3 {
        self.samples[0].position
    }

    pub fn end(&self) -> Vec3 {
        self.samples[self.samples.len() - 1].position
    }

    pub fn span(&self) -> f64 {
        self.samples[self.samples.len() - 1].t - self.samples[0].t
    }

    /// Position linearly interpolated at absolute time `t` (clamped to the span).
    pub fn position_at(&self, t: f64) -> Vec3 {
        let s = &self.samples;
        if t <= s[0].t {
            return s[0].position;
        }
        if t >= s[s.len() - 1].t {
            return s[s.len() - 1].position;
        }
        let i = s.partition_point(|x| x.t <= t);
        let (a, b) = (s[i - 1], s[i]);
        a.position.lerp(b.position, (t - a.t) / (b.t - a.t))
    }

    pub fn with_id(&self, id: impl Into<String>) -> Demonstration {
        Demonstration { id: id.into(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_basis: usize,
    pub gains: Gains,
    pub gate_forcing: bool,
    /// Centered moving average (window 5) before differentiation.
    pub smoothing: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { n_basis: 30, gains: Gains::default(), gate_forcing: true, smoothing: true }
    }
}

/// A demonstration resampled onto a uniform grid starting at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid {
    pub dt: f64,
    pub positions: Vec<Vec3>,
}

impl UniformGrid {
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn span(&self) -> f64 {
        self.time(self.positions.len() - 1)
    }
}

pub fn median_interval(demo: &Demonstration) -> f64 {
    let mut d: Vec<f64> = demo.samples().windows(2).map(|w| w[1].t - w[0].t).collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Resample at the median sample interval (clamped to [1 ms, 50 ms]) so the
/// grid spans the demonstration exactly, then optionally smooth.
pub fn resample(demo: &Demonstration, smoothing: bool) -> Result<UniformGrid, DmpError> {
    let span = demo.span();
    if !(span > 0.0) {
        return Err(DmpError::DegenerateDemonstration);
    }
    let h = median_interval(demo).clamp(1e-3, 5e-2);
    let intervals = ((span / h).round() as usize).max(MIN_DEMO_SAMPLES - 1);
    let dt = span / intervals as f64;
    let t0 = demo.samples()[0].t;
    let mut positions: Vec<Vec3> =
        (0..=intervals).map(|k| demo.position_at(t0 + k as f64 * dt)).collect();
    positions[0] = demo.start();
    positions[intervals] = demo.end();
    if smoothing {
        positions = smooth(&positions, 2);
    }
    Ok(UniformGrid { dt, positions })
}

// Centered moving average whose half-width shrinks near the ends, which
// keeps the endpoints fixed and reproduces linear segments exactly.
fn smooth(p: &[Vec3], half: usize) -> Vec<Vec3> {
    let n = p.len();
    (0..n)
        .map(|k| {
            let r = half.min(k).min(n - 1 - k);
            let mut acc = Vec3::ZERO;
            for q in &p[k - r..=k + r] {
                acc += *q;
            }
            acc * (1.0 / (2 * r + 1) as f64)
        })
        .collect()
}

/// First and second derivatives on a uniform grid: central differences in
/// the interior, second-order one-sided stencils at the ends.
pub fn differentiate(p: &[Vec3], dt: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let n = p.len();
    assert!(n >= 4, "differentiation needs at least 4 grid points");
    let mut v = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for k in 0..n {
        let (vk, ak) = if k == 0 {
            (
                (p[0] * -3.0 + p[1] * 4.0 - p[2]) * (1.0 / (2.0 * dt)),
                (p[0] * 2.0 - p[1] * 5.0 + p[2] * 4.0 - p[3]) * (1.0 / (dt * dt)),
            )
        } else if k == n - 1 {
            (
                (p[k] * 3.0 - p[k - 1] * 4.0 + p[k - 2]) * (1.0 / (2.0 * dt)),
                (p[k] * 2.0 - p[k - 1] * 5.0 + p[k - 2] * 4.0 - p[k - 3]) * (1.0 / (dt * dt)),
            )
        } else {
            (
                (p[k + 1] - p[k - 1]) * (1.0 / (2.0 * dt)),
                (p[k + 1] - p[k] * 2.0 + p[k - 1]) * (1.0 / (dt * dt)),
            )
        };
        v.push(vk);
        a.push(ak);
    }
    (v, a)
}

/// Forcing values the demonstration asks for along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub grid: UniformGrid,
    pub velocities: Vec<Vec3>,
    pub accelerations: Vec<Vec3>,
    pub tau: f64,
    pub y0: Vec3,
    pub g: Vec3,
    pub f_target: [Vec<f64>; 3],
}

/// `f = tau^2 * ydd - alpha_z * (beta_z * (g - y) - tau * yd)` per sample and axis.
pub fn forcing_targets(
    positions: &[Vec3],
    velocities: &[Vec3],
    accelerations: &[Vec3],
    tau: f64,
    g: Vec3,
    gains: &Gains,
) -> [Vec<f64>; 3] {
    std::array::from_fn(|axis| {
        positions
            .iter()
            .zip(velocities)
            .zip(accelerations)
            .map(|((y, v), a)| {
                tau * tau * a.get(axis)
                    - gains.alpha_z * (gains.beta_z * (g.get(axis) - y.get(axis)) - tau * v.get(axis))
            })
            .collect()
    })
}

pub fn compute_targets(demo: &Demonstration, opts: &FitOptions) -> Result<Targets, DmpError> {
    opts.gains.validate()?;
    let grid = resample(demo, opts.smoothing)?;
    let (velocities, accelerations) = differentiate(&grid.positions, grid.dt);
    let tau = grid.span();
    let (y0, g) = (demo.start(), demo.end());
    let f_target = forcing_targets(&grid.positions, &velocities, &accelerations, tau, g, &opts.gains);
    Ok(Targets { grid, velocities, accelerations, tau, y0, g, f_target })
}

/// Per-basis weighted least squares:
/// `w_k = sum_t psi_k(s_t) xi_t f_t / (sum_t psi_k(s_t) xi_t^2 + ridge)`.
pub fn lwr_weights(basis: &BasisSet, phases: &[f64], targets: &[f64], gated: bool) -> Vec<f64> {
    let mut num = vec![0.0; basis.len()];
    let mut den = vec![0.0; basis.len()];
    for (s, f) in phases.iter().zip(targets) {
        let xi = if gated { *s } else { 1.0 };
        for (k, psi) in basis.activations(*s).into_iter().enumerate() {
            num[k] += psi * xi * f;
            den[k] += psi * xi * xi;
        }
    }
    num.iter().zip(&den).map(|(n, d)| n / (d + LWR_RIDGE)).collect()
}

pub fn fit_lwr(demo: &Demonstration, opts: &FitOptions) -> Result<Dmp, DmpError> {
    if opts.n_basis < 2 {
        return Err(DmpError::InvalidParameter(format!("basis count must be >= 2, got {}", opts.n_basis)));
    }
    let targets = compute_targets(demo, opts)?;
    let tau = targets.tau;
    let canonical = CanonicalSystem::new(opts.gains.alpha_s, tau)?;
    let basis = default_basis(opts.n_basis, &canonical, tau)?;
    let phases = (0..targets.grid.positions.len())
        .map(|k| phase(&canonical, targets.grid.time(k)))
        .collect::<Result<Vec<_>, _>>()?;
    let v0 = targets.velocities[0];
    let dims = std::array::from_fn(|axis| DmpDim {
        alpha_z: opts.gains.alpha_z,
        beta_z: opts.gains.beta_z,
        w: lwr_weights(&basis, &phases, &targets.f_target[axis], opts.gate_forcing),
        y0: targets.y0.get(axis),
        g: targets.g.get(axis),
        z0: tau * v0.get(axis),
    });
    let orientations = if demo.samples().iter().all(|s| s.orientation.is_some()) {
        let t0 = demo.samples()[0].t;
        demo.samples().iter().map(|s| (s.t - t0, s.orientation.unwrap())).collect()
    } else {
        Vec::new()
    };
    Ok(Dmp {
        canonical,
        basis,
        dims,
        duration: tau,
        gate_forcing: opts.gate_forcing,
        frame: demo.frame().clone(),
        orientations,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutOverrides {
    pub y0: Option<Vec3>,
    pub g: Option<Vec3>,
    pub tau: Option<f64>,
    /// Initial scaled velocity; defaults to the primitive's stored `z0`.
    pub z0: Option<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub t: f64,
    pub y: Vec3,
    /// Scaled velocity, `tau * dy/dt`.
    pub z: Vec3,
    /// Physical velocity `z / tau`.
    pub v: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<UnitQuat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub frame: FrameRef,
    pub states: Vec<TrajectoryState>,
}

impl Trajectory {
    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.states.iter().map(|s| s.y)
    }

    pub fn last(&self) -> &TrajectoryState {
        self.states.last().expect("trajectories are non-empty")
    }

    pub fn duration(&self) -> f64 {
        self.last().t
    }

    /// Position interpolated at time `t` (clamped to the trajectory span).
    pub fn position_at(&self, t: f64) -> Vec3 {
        let st = &self.states;
        if t <= st[0].t {
            return st[0].y;
        }
        if t >= self.last().t {
            return self.last().y;
        }
        let i = st.partition_point(|s| s.t <= t);
        let (a, b) = (&st[i - 1], &st[i]);
        a.y.lerp(b.y, (t - a.t) / (b.t - a.t))
    }

    pub fn path_length(&self) -> f64 {
        self.states.windows(2).map(|w| w[1].y.distance(w[0].y)).sum()
    }
}

/// Root-mean-square position error of `traj` against the raw demonstration
/// samples (demonstration time rebased to its first sample).
pub fn rmse_against(traj: &Trajectory, demo: &Demonstration) -> f64 {
    let t0 = demo.samples()[0].t;
    let sum: f64 = demo
        .samples()
        .iter()
        .map(|s| {
            let d = traj.position_at(s.t - t0) - s.position;
            d.dot(d)
        })
        .sum();
    (sum / demo.samples().len() as f64).sqrt()
}

#[derive(Clone, Copy)]
struct State {
    s: f64,
    z: [f64; 3],
    y: [f64; 3],
}

impl State {
    fn axpy(&self, k: f64, d: &State) -> State {
        State {
            s: self.s + k * d.s,
            z: std::array::from_fn(|i| self.z[i] + k * d.z[i]),
            y: std::array::from_fn(|i| self.y[i] + k * d.y[i]),
        }
    }

    fn is_finite(&self) -> bool {
        self.s.is_finite() && self.z.iter().chain(&self.y).all(|v| v.is_finite())
    }
}

struct Dynamics<'a> {
    basis: &'a BasisSet,
    alpha_s: f64,
    tau: f64,
    gated: bool,
    alpha_z: [f64; 3],
    beta_z: [f64; 3],
    goal: [f64; 3],
    weights: [Vec<f64>; 3],
}

impl Dynamics<'_> {
    fn derivative(&self, x: &State, psi: &mut [f64]) -> State {
        self.basis.eval_into(x.s, psi);
        let gate = if self.gated { x.s } else { 1.0 };
        let inv_tau = 1.0 / self.tau;
        let mut dz = [0.0; 3];
        let mut dy = [0.0; 3];
        for i in 0..3 {
            let f: f64 = self.weights[i].iter().zip(psi.iter()).map(|(w, p)| w * p).sum::<f64>() * gate;
            dz[i] = (self.alpha_z[i] * (self.beta_z[i] * (self.goal[i] - x.y[i]) - x.z[i]) + f) * inv_tau;
            dy[i] = x.z[i] * inv_tau;
        }
        State { s: -self.alpha_s * x.s * inv_tau, z: dz, y: dy }
    }

    fn rk4(&self, x: &State, h: f64, psi: &mut [f64]) -> State {
        let k1 = self.derivative(x, psi);
        let k2 = self.derivative(&x.axpy(0.5 * h, &k1), psi);
        let k3 = self.derivative(&x.axpy(0.5 * h, &k2), psi);
        let k4 = self.derivative(&x.axpy(h, &k3), psi);
        State {
            s: x.s + h / 6.0 * (k1.s + 2.0 * k2.s + 2.0 * k3.s + k4.s),
            z: std::array::from_fn(|i| x.z[i] + h / 6.0 * (k1.z[i] + 2.0 * k2.z[i] + 2.0 * k3.z[i] + k4.z[i])),
            y: std::array::from_fn(|i| x.y[i] + h / 6.0 * (k1.y[i] + 2.0 * k2.y[i] + 2.0 * k3.y[i] + k4.y[i])),
        }
    }
}

/// Integrate the transformation system with fixed-step RK4 from `s = 1`.
/// `zeta = None` means no perturbation.
pub fn rollout(
    dmp: &Dmp,
    zeta: Option<&Zeta>,
    overrides: &RolloutOverrides,
    dt: f64,
    horizon: f64,
) -> Result<Trajectory, DmpError> {
    dmp.validate()?;
    positive("dt", dt)?;
    let n = dmp.n_basis();
    if let Some(z) = zeta {
        for row in z {
            if row.len() != n {
                return Err(DmpError::DimensionMismatch { expected: n, got: row.len() });
            }
        }
    }
    let tau = match overrides.tau {
        Some(t) => positive("tau", t)?,
        None => dmp.canonical.tau,
    };
    let duration = dmp.duration * tau / dmp.canonical.tau;
    if !(horizon.is_finite() && horizon >= duration - 1e-9) {
        return Err(DmpError::InvalidParameter(format!(
            "horizon {horizon} is shorter than the movement duration {duration}"
        )));
    }
    let y0 = overrides.y0.unwrap_or_else(|| dmp.start());
    let goal = overrides.g.unwrap_or_else(|| dmp.goal());
    let z0 = overrides.z0.unwrap_or_else(|| dmp.initial_z());
    if !(y0.is_finite() && goal.is_finite() && z0.is_finite()) {
        return Err(DmpError::InvalidParameter("non-finite rollout override".into()));
    }

    let dynamics = Dynamics {
        basis: &dmp.basis,
        alpha_s: dmp.canonical.alpha_s,
        tau,
        gated: dmp.gate_forcing,
        alpha_z: std::array::from_fn(|i| dmp.dims[i].alpha_z),
        beta_z: std::array::from_fn(|i| dmp.dims[i].beta_z),
        goal: goal.to_array(),
        weights: std::array::from_fn(|i| match zeta {
            Some(z) => dmp.dims[i].w.iter().zip(&z[i]).map(|(w, d)| w - d).collect(),
            None => dmp.dims[i].w.clone(),
        }),
    };

    let steps = ((horizon / dt).round() as usize).max(1);
    let time_scale = dmp.canonical.tau / tau;
    let mut psi = vec![0.0; n];
    let mut x = State { s: 1.0, z: z0.to_array(), y: y0.to_array() };
    let mut states = Vec::with_capacity(steps + 1);
    let emit = |k: usize, x: &State| {
        let t = k as f64 * dt;
        let z = Vec3::from_array(x.z);
        TrajectoryState {
            t,
            y: Vec3::from_array(x.y),
            z,
            v: z * (1.0 / tau),
            orientation: dmp.orientation_at(t * time_scale),
        }
    };
    states.push(emit(0, &x));
    for k in 1..=steps {
        x = dynamics.rk4(&x, dt, &mut psi);
        if !x.is_finite() {
            return Err(DmpError::NonFiniteState { step: k });
        }
        states.push(emit(k, &x));
    }
    Ok(Trajectory { dt, frame: dmp.frame.clone(), states })
}
