use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use cdmp_core::cdmp::SolveOptions;
use cdmp_core::dmp::FitOptions;
use cdmp_core::geometry::{FrameRef, Pose, UnitQuat, Vec3};
use cdmp_core::skills::{
    fit_chain, rollout_chain, rollout_chain_at, segment, ChainRolloutRequest, Keypoint, SceneObject, SegmentSpec,
    SkillChain,
};
use cdmp_core::synth::{peg_hole_pose, peg_insert, peg_keypoint_time, PEG_END};

const DURATION: f64 = 3.0;

fn objects() -> BTreeMap<String, SceneObject> {
    BTreeMap::from([("hole".to_string(), SceneObject::new("hole", peg_hole_pose()))])
}

fn peg_chain(keypoints: &[Keypoint], frames: &[FrameRef]) -> SkillChain {
    let demo = peg_insert("peg", DURATION, 0.01).unwrap();
    let parts = segment(&demo, keypoints).unwrap();
    let specs: Vec<SegmentSpec> = frames.iter().cloned().map(SegmentSpec::in_frame).collect();
    fit_chain("c", "peg", &parts, &specs, &[], &objects(), &FitOptions::default(), &SolveOptions::default()).unwrap()
}

fn split_chain() -> SkillChain {
    peg_chain(&[Keypoint::new(peg_keypoint_time(DURATION), "above")], &[FrameRef::World, FrameRef::Object("hole".into())])
}

fn with_hole(pose: Pose) -> ChainRolloutRequest {
    ChainRolloutRequest { object_poses: BTreeMap::from([("hole".to_string(), pose)]), ..Default::default() }
}

#[test]
fn goal_is_stored_relative_to_hole() {
    let chain = split_chain();
    let seg = &chain.segments[1];
    let expected = PEG_END - peg_hole_pose().translation;
    assert!((seg.goal_in_frame - expected).norm() < 1e-12);
    // teach-time boundary equality
    let a = chain.segments[0].goal_in_frame;
    let b = peg_hole_pose().transform_point(seg.start_in_frame);
    assert!((a - b).norm() < 1e-9);
}

#[test]
fn boundary_is_continuous_and_endpoint_matches_unsegmented() {
    let chain = split_chain();
    let out = rollout_chain(&chain, &ChainRolloutRequest::default()).unwrap();
    let states = &out.trajectory.states;
    let b = out.segment_starts[1];
    // the first state of segment 2 starts exactly where segment 1 ended
    let seg1 = chain.segments[0].cdmp.rollout(&Default::default(), 0.01, chain.segments[0].cdmp.horizon).unwrap();
    assert_eq!(states[b - 1].y, seg1.last().y);
    assert_eq!(states[b - 1].v, seg1.last().v);
    for (k, s) in states.iter().enumerate() {
        assert_eq!(s.t, k as f64 * 0.01);
    }

    let whole = peg_chain(&[], &[FrameRef::World]);
    let single = rollout_chain(&whole, &ChainRolloutRequest::default()).unwrap();
    let gap = (states.last().unwrap().y - single.trajectory.last().y).norm();
    assert!(gap < 0.02, "{gap}");
    assert!((states.last().unwrap().y - PEG_END).norm() < 0.02);
}

#[test]
fn velocity_carries_over_boundaries() {
    let chain = split_chain();
    let out = rollout_chain(&chain, &ChainRolloutRequest::default()).unwrap();
    let b = out.segment_starts[1];
    let seg2_first = chain.segments[1]
        .cdmp
        .rollout(
            &cdmp_core::dmp::RolloutOverrides {
                y0: Some(out.trajectory.states[b - 1].y),
                g: Some(out.goals[1]),
                z0: Some(out.trajectory.states[b - 1].z * (chain.segments[1].cdmp.dmp.canonical.tau / chain.segments[0].cdmp.dmp.canonical.tau)),
                tau: None,
            },
            0.01,
            chain.segments[1].cdmp.horizon,
        )
        .unwrap();
    let jump = (seg2_first.states[0].v - out.trajectory.states[b - 1].v).norm();
    assert!(jump < 1e-12, "{jump}");
}

#[test]
fn translating_the_hole_translates_the_endpoint() {
    let chain = split_chain();
    let base = rollout_chain(&chain, &ChainRolloutRequest::default()).unwrap();
    let shift = Vec3::new(0.1, 0.0, 0.0);
    let moved = rollout_chain(&chain, &with_hole(Pose::translation(peg_hole_pose().translation + shift))).unwrap();
    let delta = moved.trajectory.last().y - base.trajectory.last().y;
    assert!((delta - shift).norm() < 1e-3, "{delta:?}");
}

#[test]
fn rotating_the_hole_rotates_the_relative_endpoint() {
    let chain = split_chain();
    let origin = peg_hole_pose().translation;
    let base = rollout_chain(&chain, &ChainRolloutRequest::default()).unwrap();
    let q = UnitQuat::rot_z(FRAC_PI_2);
    let moved = rollout_chain(&chain, &with_hole(Pose::new(q, origin))).unwrap();
    let expected = q.rotate(base.trajectory.last().y - origin);
    let got = moved.trajectory.last().y - origin;
    assert!((got - expected).norm() < 1e-3, "{got:?} vs {expected:?}");
}

#[test]
fn world_segments_ignore_object_moves() {
    let chain = split_chain();
    let base = rollout_chain(&chain, &ChainRolloutRequest::default()).unwrap();
    let moved = rollout_chain(&chain, &with_hole(Pose::translation(Vec3::new(-0.3, 0.2, 0.1)))).unwrap();
    let b = base.segment_starts[1];
    assert_eq!(base.trajectory.states[..b], moved.trajectory.states[..b]);
}

#[test]
fn explicit_start_and_horizons() {
    let chain = split_chain();
    let poses = BTreeMap::from([("hole".to_string(), peg_hole_pose())]);
    let start = Vec3::new(0.05, 0.0, 0.3);
    let horizons = [2.5, 1.5];
    let tr = rollout_chain_at(&chain, start, &poses, 0.005, Some(&horizons)).unwrap();
    assert_eq!(tr.states[0].y, start);
    assert_eq!(tr.states.len(), 500 + 300 + 1);
    assert!((tr.last().y - PEG_END).norm() < 0.02);
    let missing = rollout_chain_at(&chain, start, &BTreeMap::new(), 0.01, Some(&[1.0])).unwrap_err();
    assert_eq!(missing.code(), "invalid_parameter");
}
