//! Canonical JSON and trajectory CSV.
//!
//! Every float is written with 17 significant digits (`{:.16e}`), which
//! round-trips any `f64` exactly; combined with struct field order and
//! sorted maps this makes serialization byte-stable.

use std::fmt::Write as _;
use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;

use crate::dmp::Trajectory;
use crate::geometry::{min_sdf, ConstraintRegion};
use crate::skills::ChainRollout;

pub const CSV_HEADER: &str = "t,x,y,z,vx,vy,vz,min_sdf,violating_region";

/// Full-precision float text shared by JSON and CSV.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct FullPrecision;

impl Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

pub fn to_canonical_vec<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(out)
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let bytes = to_canonical_vec(value)?;
    Ok(String::from_utf8(bytes).expect("serde_json emits UTF-8"))
}

fn write_row(out: &mut String, s: &crate::dmp::TrajectoryState, regions: &[ConstraintRegion]) {
    let nums = [s.t, s.y.x, s.y.y, s.y.z, s.v.x, s.v.y, s.v.z];
    for (i, v) in nums.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_f64(*v));
    }
    match min_sdf(regions, s.y) {
        Ok((d, id)) => {
            let _ = write!(out, ",{},{}", format_f64(d), if d < 0.0 { id } else { "" });
        }
        Err(_) => out.push_str(",,"),
    }
    out.push('\n');
}

/// CSV of a trajectory; `min_sdf` is the smallest `sdf - margin` over
/// `regions` and `violating_region` names the region when it is negative.
pub fn trajectory_csv(traj: &Trajectory, regions: &[ConstraintRegion]) -> String {
    let mut out = String::with_capacity(64 + traj.states.len() * 180);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in &traj.states {
        write_row(&mut out, s, regions);
    }
    out
}

/// CSV of a chained rollout, each state checked against its own segment's regions.
pub fn chain_csv(rollout: &ChainRollout) -> String {
    let states = &rollout.trajectory.states;
    let mut out = String::with_capacity(64 + states.len() * 180);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (i, s) in states.iter().enumerate() {
        write_row(&mut out, s, &rollout.segment_regions[segment_of(&rollout.segment_starts, i)]);
    }
    out
}

/// Segment owning state `i` of a chained rollout.
pub fn segment_of(starts: &[usize], i: usize) -> usize {
    starts.partition_point(|&s| s <= i).saturating_sub(1)
}
