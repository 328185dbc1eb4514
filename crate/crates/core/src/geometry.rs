//! Rigid poses, frame references and signed-distance queries for the
//! forbidden-volume primitives (spheres and oriented boxes).
//!
//! Signed distances are negative inside a shape and positive outside. The
//! safety margin stored on a [`ConstraintRegion`] is never folded into
//! [`sdf`]; it is applied by [`min_sdf`] and by the constraint solver, where
//! the feasibility condition reads `sdf(region, p) >= region.margin`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("constraint region list is empty")]
    EmptyRegionList,
}

impl GeometryError {
    pub fn code(&self) -> &'static str {
        match self {
            GeometryError::InvalidGeometry(_) => "invalid_geometry",
            GeometryError::EmptyRegionList => "empty_region_list",
        }
    }
}

/// A point or displacement in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {axis} out of range"),
        }
    }

    pub fn set(&mut self, axis: usize, value: f64) {
        match axis {
            0 => self.x = value,
            1 => self.y = value,
            2 => self.z = value,
            _ => panic!("axis index {axis} out of range"),
        }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn max_scalar(self, v: f64) -> Vec3 {
        Vec3::new(self.x.max(v), self.y.max(v), self.z.max(v))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, o: Vec3, u: f64) -> Vec3 {
        self + (o - self) * u
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::from_array(a)
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Unit quaternion `w + xi + yj + zk`, renormalized whenever it is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::InvalidGeometry(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(UnitQuat { w: w / n, x: x / n, y: y / n, z: z / n }.renormalized())
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self, GeometryError> {
        let n = axis.norm();
        if !n.is_finite() || n < 1e-12 || !angle.is_finite() {
            return Err(GeometryError::InvalidGeometry("degenerate rotation axis".into()));
        }
        let a = axis * (1.0 / n);
        let (sh, ch) = (0.5 * angle).sin_cos();
        UnitQuat::new(ch, a.x * sh, a.y * sh, a.z * sh)
    }

    pub fn rot_z(angle: f64) -> Self {
        UnitQuat::from_axis_angle(Vec3::Z, angle).expect("z axis is valid")
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    // One Newton step on 1/sqrt keeps |norm - 1| at the rounding floor.
    fn renormalized(self) -> Self {
        let n2 = self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z;
        let k = 1.5 - 0.5 * n2;
        UnitQuat { w: self.w * k, x: self.x * k, y: self.y * k, z: self.z * k }
    }

    pub fn conjugate(self) -> Self {
        UnitQuat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn mul(self, o: UnitQuat) -> UnitQuat {
        UnitQuat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
        .renormalized()
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2w(q x v) + 2 q x (q x v)
        let q = Vec3::new(self.x, self.y, self.z);
        let t = q.cross(v) * 2.0;
        v + t * self.w + q.cross(t)
    }

    /// Shortest-path spherical interpolation.
    pub fn slerp(self, o: UnitQuat, u: f64) -> UnitQuat {
        let mut cos = self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z;
        let mut o = o;
        if cos < 0.0 {
            cos = -cos;
            o = UnitQuat { w: -o.w, x: -o.x, y: -o.y, z: -o.z };
        }
        let (a, b) = if cos > 0.9995 {
            (1.0 - u, u)
        } else {
            let theta = cos.acos();
            let s = theta.sin();
            (((1.0 - u) * theta).sin() / s, (u * theta).sin() / s)
        };
        UnitQuat::new(
            a * self.w + b * o.w,
            a * self.x + b * o.x,
            a * self.y + b * o.y,
            a * self.z + b * o.z,
        )
        .unwrap_or(self)
    }
}

impl TryFrom<[f64; 4]> for UnitQuat {
    type Error = GeometryError;
    fn try_from(a: [f64; 4]) -> Result<Self, Self::Error> {
        UnitQuat::new(a[0], a[1], a[2], a[3])
    }
}

impl From<UnitQuat> for [f64; 4] {
    fn from(q: UnitQuat) -> Self {
        q.to_array()
    }
}

/// Rigid transform: rotate, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuat,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: UnitQuat::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: UnitQuat, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn translation(t: Vec3) -> Self {
        Pose { rotation: UnitQuat::IDENTITY, translation: t }
    }

    pub fn rotation(r: UnitQuat) -> Self {
        Pose { rotation: r, translation: Vec3::ZERO }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul(other.rotation),
            translation: self.translation + self.rotation.rotate(other.translation),
        }
    }

    pub fn invert(&self) -> Pose {
        let r = self.rotation.conjugate();
        Pose { rotation: r, translation: -r.rotate(self.translation) }
    }

    pub fn transform_point(&self, v: Vec3) -> Vec3 {
        self.rotation.rotate(v) + self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.translation.is_finite() && self.rotation.to_array().iter().all(|c| c.is_finite())
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert(p: &Pose) -> Pose {
    p.invert()
}

pub fn transform_point(p: &Pose, v: Vec3) -> Vec3 {
    p.transform_point(v)
}

/// The frame a demonstration, trajectory or skill is expressed in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrameRef {
    #[default]
    World,
    Object(String),
}

impl FrameRef {
    pub fn object_id(&self) -> Option<&str> {
        match self {
            FrameRef::World => None,
            FrameRef::Object(id) => Some(id),
        }
    }
}

impl std::fmt::Display for FrameRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameRef::World => write!(f, "world"),
            FrameRef::Object(id) => write!(f, "object:{id}"),
        }
    }
}

impl std::str::FromStr for FrameRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "world" {
            return Ok(FrameRef::World);
        }
        match s.strip_prefix("object:") {
            Some(id) if !id.is_empty() => Ok(FrameRef::Object(id.to_string())),
            _ => Err(format!("frame must be `world` or `object:<id>`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { pose: Pose, half_extents: Vec3 },
}

impl Shape {
    fn validate(&self) -> Result<(), GeometryError> {
        match self {
            Shape::Sphere { center, radius } => {
                if !center.is_finite() {
                    return Err(GeometryError::InvalidGeometry("sphere center must be finite".into()));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(GeometryError::InvalidGeometry(format!(
                        "sphere radius must be positive, got {radius}"
                    )));
                }
            }
            Shape::Box { pose, half_extents } => {
                if !pose.is_finite() {
                    return Err(GeometryError::InvalidGeometry("box pose must be finite".into()));
                }
                let h = half_extents;
                if !(h.is_finite() && h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
                    return Err(GeometryError::InvalidGeometry(format!(
                        "box half extents must be positive, got ({}, {}, {})",
                        h.x, h.y, h.z
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A forbidden volume the end effector must stay `margin` away from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegion", into = "RawRegion")]
pub struct ConstraintRegion {
    id: String,
    shape: Shape,
    margin: f64,
}

#[derive(Serialize, Deserialize)]
struct RawRegion {
    id: String,
    #[serde(flatten)]
    shape: Shape,
    margin: f64,
}

impl TryFrom<RawRegion> for ConstraintRegion {
    type Error = GeometryError;
    fn try_from(r: RawRegion) -> Result<Self, Self::Error> {
        ConstraintRegion::new(r.id, r.shape, r.margin)
    }
}

impl From<ConstraintRegion> for RawRegion {
    fn from(r: ConstraintRegion) -> Self {
        RawRegion { id: r.id, shape: r.shape, margin: r.margin }
    }
}

impl ConstraintRegion {
    pub fn new(id: impl Into<String>, shape: Shape, margin: f64) -> Result<Self, GeometryError> {
        let id = id.into();
        if id.is_empty() {
            return Err(GeometryError::InvalidGeometry("constraint id must not be empty".into()));
        }
        shape.validate()?;
        if !(margin.is_finite() && margin >= 0.0) {
            return Err(GeometryError::InvalidGeometry(format!(
                "margin must be finite and non-negative, got {margin}"
            )));
        }
        Ok(ConstraintRegion { id, shape, margin })
    }

    pub fn sphere(
        id: impl Into<String>,
        center: Vec3,
        radius: f64,
        margin: f64,
    ) -> Result<Self, GeometryError> {
        ConstraintRegion::new(id, Shape::Sphere { center, radius }, margin)
    }

    pub fn cuboid(
        id: impl Into<String>,
        pose: Pose,
        half_extents: Vec3,
        margin: f64,
    ) -> Result<Self, GeometryError> {
        ConstraintRegion::new(id, Shape::Box { pose, half_extents }, margin)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// The same region moved rigidly by `t` (applied in world coordinates).
    pub fn transformed(&self, t: &Pose) -> ConstraintRegion {
        let shape = match &self.shape {
            Shape::Sphere { center, radius } => {
                Shape::Sphere { center: t.transform_point(*center), radius: *radius }
            }
            Shape::Box { pose, half_extents } => {
                Shape::Box { pose: t.compose(pose), half_extents: *half_extents }
            }
        };
        ConstraintRegion { id: self.id.clone(), shape, margin: self.margin }
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        sdf(self, p)
    }

    pub fn sdf_with_gradient(&self, p: Vec3) -> (f64, Vec3) {
        sdf_with_gradient(self, p)
    }
}

fn sign_or_plus(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Exact Euclidean signed distance from `p` to the region's surface.
pub fn sdf(region: &ConstraintRegion, p: Vec3) -> f64 {
    match &region.shape {
        Shape::Sphere { center, radius } => (p - *center).norm() - radius,
        Shape::Box { pose, half_extents } => {
            let local = pose.rotation.conjugate().rotate(p - pose.translation);
            let q = local.abs() - *half_extents;
            let outside = q.max_scalar(0.0).norm();
            let inside = q.x.max(q.y).max(q.z).min(0.0);
            outside + inside
        }
    }
}

/// Signed distance plus its spatial gradient. At non-differentiable points
/// (sphere center, box edges/corners, interior ties between faces) the
/// gradient of the first achieving component is returned.
pub fn sdf_with_gradient(region: &ConstraintRegion, p: Vec3) -> (f64, Vec3) {
    match &region.shape {
        Shape::Sphere { center, radius } => {
            let d = p - *center;
            let n = d.norm();
            let grad = if n > 0.0 { d * (1.0 / n) } else { Vec3::X };
            (n - radius, grad)
        }
        Shape::Box { pose, half_extents } => {
            let local = pose.rotation.conjugate().rotate(p - pose.translation);
            let q = local.abs() - *half_extents;
            let qmax = q.x.max(q.y).max(q.z);
            let (value, grad_local) = if qmax > 0.0 {
                let pos = q.max_scalar(0.0);
                let n = pos.norm();
                let g = Vec3::new(
                    sign_or_plus(local.x) * pos.x,
                    sign_or_plus(local.y) * pos.y,
                    sign_or_plus(local.z) * pos.z,
                ) * (1.0 / n);
                (n, g)
            } else {
                let axis = if q.x >= q.y && q.x >= q.z {
                    0
                } else if q.y >= q.z {
                    1
                } else {
                    2
                };
                let mut g = Vec3::ZERO;
                g.set(axis, sign_or_plus(local.get(axis)));
                (qmax, g)
            };
            (value, pose.rotation.rotate(grad_local))
        }
    }
}

/// Minimum of `sdf - margin` over `regions`, with the id of the achieving
/// region. Ties go to the lowest index.
pub fn min_sdf(regions: &[ConstraintRegion], p: Vec3) -> Result<(f64, &str), GeometryError> {
    let mut best: Option<(f64, &str)> = None;
    for r in regions {
        let v = sdf(r, p) - r.margin;
        match best {
            Some((b, _)) if v >= b => {}
            _ => best = Some((v, r.id())),
        }
    }
    best.ok_or(GeometryError::EmptyRegionList)
}
