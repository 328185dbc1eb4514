//! Constrained dynamic movement primitives.
//!
//! Demonstrations are fitted into movement primitives by locally weighted
//! regression ([`dmp`]); forbidden volumes are enforced by perturbing the
//! learned forcing weights through a constrained optimization ([`cdmp`]);
//! segmented skills are chained and re-targeted through object frames
//! ([`skills`]); everything persists in a versioned [`workspace`] file.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cdmp;
pub mod dmp;
pub mod export;
pub mod geometry;
pub mod pipeline;
pub mod skills;
pub mod synth;
pub mod workspace;

pub use geometry::{ConstraintRegion, FrameRef, Pose, Shape, UnitQuat, Vec3};
