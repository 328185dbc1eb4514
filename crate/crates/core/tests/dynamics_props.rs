use cdmp_core::cdmp::{ConstraintProblem, InfluenceMatrix, SolveOptions};
use cdmp_core::dmp::{
    default_basis, fit_lwr, rmse_against, rollout, CanonicalSystem, DemoSample, Demonstration, Dmp, DmpDim,
    FitOptions, Gains, RolloutOverrides, Zeta,
};
use cdmp_core::geometry::{ConstraintRegion, FrameRef, Pose, Vec3};
use cdmp_core::synth::minjerk_line;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dmp_with(y0: Vec3, g: Vec3, w: [Vec<f64>; 3], duration: f64, gated: bool) -> Dmp {
    let gains = Gains::default();
    let canonical = CanonicalSystem::new(gains.alpha_s, duration).unwrap();
    let basis = default_basis(w[0].len(), &canonical, duration).unwrap();
    Dmp {
        canonical,
        basis,
        dims: std::array::from_fn(|i| DmpDim {
            alpha_z: gains.alpha_z,
            beta_z: gains.beta_z,
            w: w[i].clone(),
            y0: y0.get(i),
            g: g.get(i),
            z0: 0.0,
        }),
        duration,
        gate_forcing: gated,
        frame: FrameRef::World,
        orientations: vec![],
    }
}

fn random_point(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

/// Smooth random weights: a few low-frequency sinusoids over the basis index.
fn smooth_weights(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let (a, b, ph) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..6.0));
    (0..n)
        .map(|k| {
            let u = k as f64 / n as f64;
            scale * (a * (3.0 * u + ph).sin() + b * (7.0 * u).cos())
        })
        .collect()
}

#[test]
fn zero_forcing_reaches_goal_without_overshoot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (y0, g) = (random_point(&mut rng), random_point(&mut rng));
        let d = 2.0;
        let dmp = dmp_with(y0, g, std::array::from_fn(|_| vec![0.0; 30]), d, true);
        let tr = rollout(&dmp, None, &RolloutOverrides::default(), 0.001, 1.5 * d).unwrap();
        let dist = (g - y0).norm();
        assert!((tr.last().y - g).norm() < 1e-3 * dist);
        for axis in 0..3 {
            let (a, b) = (y0.get(axis), g.get(axis));
            for s in &tr.states {
                let y = s.y.get(axis);
                assert!(y >= a.min(b) - 1e-9 && y <= a.max(b) + 1e-9, "overshoot on axis {axis}");
            }
        }
        // distance to goal never grows once the motion has started
        let dists: Vec<f64> = tr.states.iter().map(|s| (s.y - g).norm()).collect();
        assert!(dists.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}

#[test]
fn fit_reproduces_random_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let (y0, g) = (random_point(&mut rng), random_point(&mut rng));
        let w = std::array::from_fn(|_| smooth_weights(&mut rng, 30, 40.0));
        let dmp = dmp_with(y0, g, w, 2.0, true);
        let tr = rollout(&dmp, None, &RolloutOverrides::default(), 0.01, 2.0).unwrap();
        let samples = tr.states.iter().map(|s| DemoSample::new(s.t, s.y)).collect();
        let demo = Demonstration::new("r", FrameRef::World, samples).unwrap();
        let fitted = fit_lwr(&demo, &FitOptions::default()).unwrap();
        let re = rollout(&fitted, None, &RolloutOverrides::default(), 0.01, 2.0).unwrap();
        let rmse = rmse_against(&re, &demo);
        assert!(rmse < 0.01 * tr.path_length(), "rmse {rmse} vs path {}", tr.path_length());
    }
}

fn random_zeta(rng: &mut ChaCha8Rng, n: usize) -> Zeta {
    let mut z: Zeta = std::array::from_fn(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let norm = z.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let target = rng.gen_range(0.0..10.0);
    z.iter_mut().flatten().for_each(|v| *v *= target / norm);
    z
}

#[test]
fn affine_reconstruction_matches_direct_rollout() {
    let demo = minjerk_line("l", Vec3::ZERO, Vec3::new(1.0, 0.5, -0.2), 2.0, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for gated in [true, false] {
        let dmp = fit_lwr(&demo, &FitOptions { gate_forcing: gated, ..FitOptions::default() }).unwrap();
        let (dt, horizon) = (0.01, 2.5);
        let phi = InfluenceMatrix::compute(&dmp, dt, horizon).unwrap();
        let nominal = rollout(&dmp, None, &RolloutOverrides::default(), dt, horizon).unwrap();
        for _ in 0..50 {
            let zeta = random_zeta(&mut rng, dmp.n_basis());
            let direct = rollout(&dmp, Some(&zeta), &RolloutOverrides::default(), dt, horizon).unwrap();
            for (i, s) in direct.states.iter().enumerate() {
                let affine = phi.apply(i, nominal.states[i].y, &zeta);
                assert!((affine - s.y).norm() < 1e-8, "step {i}: {:?}", affine - s.y);
            }
        }
    }
}

#[test]
fn lagrangian_gradient_matches_central_differences() {
    let demo = minjerk_line("l", Vec3::ZERO, Vec3::X, 2.0, 0.01).unwrap();
    let dmp = fit_lwr(&demo, &FitOptions::default()).unwrap();
    let regions = [
        ConstraintRegion::sphere("s", Vec3::new(0.5, 0.0, 0.0), 0.15, 0.02).unwrap(),
        ConstraintRegion::cuboid("b", Pose::translation(Vec3::new(0.3, 0.1, 0.0)), Vec3::new(0.1, 0.05, 0.2), 0.02)
            .unwrap(),
    ];
    let problem = ConstraintProblem::new(&dmp, &regions, &SolveOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-6;
    for _ in 0..20 {
        let zeta: Vec<f64> = (0..problem.dimension()).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let lambda: Vec<f64> = (0..problem.num_constraints()).map(|_| rng.gen_range(0.0..5.0)).collect();
        let rho = rng.gen_range(1.0..100.0);
        let (_, grad) = problem.lagrangian(&zeta, &lambda, rho);
        let fd: Vec<f64> = (0..zeta.len())
            .map(|k| {
                let (mut a, mut b) = (zeta.clone(), zeta.clone());
                a[k] += h;
                b[k] -= h;
                (problem.lagrangian(&a, &lambda, rho).0 - problem.lagrangian(&b, &lambda, rho).0) / (2.0 * h)
            })
            .collect();
        let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }
}

proptest! {
    #[test]
    fn normalized_activations_sum_to_one(s in 0.0..=1.0f64, n in 2usize..60, d in 0.2..5.0f64) {
        let cs = CanonicalSystem::new(Gains::default().alpha_s, d).unwrap();
        let basis = default_basis(n, &cs, d).unwrap();
        let sum: f64 = basis.eval(s).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rollout_is_bit_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = std::array::from_fn(|_| smooth_weights(&mut rng, 10, 50.0));
        let dmp = dmp_with(random_point(&mut rng), random_point(&mut rng), w, 1.0, seed % 2 == 0);
        let a = rollout(&dmp, None, &RolloutOverrides::default(), 0.01, 1.25).unwrap();
        let b = rollout(&dmp, None, &RolloutOverrides::default(), 0.01, 1.25).unwrap();
        prop_assert_eq!(a, b);
    }
}
