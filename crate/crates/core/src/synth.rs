//! Synthetic demonstrations used by the CLI and the test fixtures.

use std::f64::consts::PI;

use crate::dmp::{DemoSample, Demonstration, DmpError};
use crate::geometry::{FrameRef, Pose, Vec3};

/// Start of the peg-insertion demonstration (world frame).
pub const PEG_START: Vec3 = Vec3::new(0.0, 0.0, 0.3);
/// End of the horizontal approach, directly above the hole.
pub const PEG_ABOVE_HOLE: Vec3 = Vec3::new(0.4, 0.0, 0.3);
/// End of the vertical descent.
pub const PEG_END: Vec3 = Vec3::new(0.4, 0.0, 0.1);
/// Fraction of the peg demonstration spent on the approach.
pub const PEG_APPROACH_FRACTION: f64 = 0.6;

/// Teach-time pose of the hole object the insertion is relative to.
pub fn peg_hole_pose() -> Pose {
    Pose::translation(Vec3::new(0.35, 0.0, 0.05))
}

pub fn peg_keypoint_time(duration: f64) -> f64 {
    PEG_APPROACH_FRACTION * duration
}

/// Normalized minimum-jerk profile `10u^3 - 15u^4 + 6u^5` on `u ∈ [0, 1]`.
pub fn minjerk_profile(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

fn sample_times(duration: f64, dt: f64) -> Result<Vec<f64>, DmpError> {
    if !(duration.is_finite() && duration > 0.0 && dt.is_finite() && dt > 0.0) {
        return Err(DmpError::InvalidParameter("duration and dt must be positive".into()));
    }
    let steps = (duration / dt).round() as usize;
    Ok((0..=steps).map(|k| (k as f64 * dt).min(duration)).collect())
}

fn build(
    id: &str,
    duration: f64,
    dt: f64,
    f: impl Fn(f64) -> Vec3,
) -> Result<Demonstration, DmpError> {
    let samples = sample_times(duration, dt)?
        .into_iter()
        .map(|t| DemoSample::new(t, f(t / duration)))
        .collect();
    Demonstration::new(id, FrameRef::World, samples)
}

pub fn minjerk_line(
    id: &str,
    start: Vec3,
    end: Vec3,
    duration: f64,
    dt: f64,
) -> Result<Demonstration, DmpError> {
    build(id, duration, dt, |u| start.lerp(end, minjerk_profile(u)))
}

/// Half circle of `radius` in the xy-plane from `start` to `start + (2r, 0, 0)`.
pub fn arc(id: &str, start: Vec3, radius: f64, duration: f64, dt: f64) -> Result<Demonstration, DmpError> {
    build(id, duration, dt, |u| {
        let th = PI * minjerk_profile(u);
        start + Vec3::new(radius * (1.0 - th.cos()), radius * th.sin(), 0.0)
    })
}

/// Horizontal approach at constant height followed by a vertical descent.
pub fn peg_insert(id: &str, duration: f64, dt: f64) -> Result<Demonstration, DmpError> {
    let split = PEG_APPROACH_FRACTION;
    build(id, duration, dt, |u| {
        if u <= split {
            PEG_START.lerp(PEG_ABOVE_HOLE, minjerk_profile(u / split))
        } else {
            PEG_ABOVE_HOLE.lerp(PEG_END, minjerk_profile((u - split) / (1.0 - split)))
        }
    })
}
