use confined_nav::field::{DistanceSource, FieldError};
use confined_nav::geometry::{generate_collision_points, Vector5};
use confined_nav::planner::{init_trajectory, obstacle_functional, obstacle_gradient, smoothness_gradient, step, SmoothNorm};
use confined_nav::{plan, Configuration, PinMask, PlannerParams, RobotModel, Trajectory};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Ball {
    center: Vector3<f64>,
    radius: f64,
}

impl DistanceSource for Ball {
    fn distance(&self, p: &Vector3<f64>) -> Result<f64, FieldError> {
        Ok((p - self.center).norm() - self.radius)
    }

    fn distance_gradient(&self, p: &Vector3<f64>) -> Result<(f64, Vector3<f64>), FieldError> {
        let r = p - self.center;
        Ok((r.norm() - self.radius, r / r.norm()))
    }
}

struct Open;

impl DistanceSource for Open {
    fn distance(&self, _: &Vector3<f64>) -> Result<f64, FieldError> {
        Ok(10.0)
    }

    fn distance_gradient(&self, _: &Vector3<f64>) -> Result<(f64, Vector3<f64>), FieldError> {
        Ok((10.0, Vector3::zeros()))
    }
}

fn wavy(rng: &mut ChaCha8Rng, m: &RobotModel, n: usize, mask: PinMask) -> Trajectory {
    wavy_over(rng, m, n, 2.0, mask)
}

fn wavy_over(rng: &mut ChaCha8Rng, m: &RobotModel, n: usize, length: f64, mask: PinMask) -> Trajectory {
    let amp: [f64; 5] = [0.025, 0.025, 0.015, 0.05, 0.015].map(|a| a * length);
    let phase: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let bump = |d: usize| amp[d] * (std::f64::consts::PI * t).sin() * (3.0 * t + phase[d]).sin();
            Configuration::new(
                length * t + bump(0),
                bump(1),
                m.z_nom + bump(2),
                bump(3),
                m.s_nom + bump(4),
            )
        })
        .collect();
    Trajectory {
        samples,
        dt: 0.1,
        pinned: mask,
    }
}

#[test]
fn obstacle_gradient_matches_functional_differences() {
    let m = RobotModel::default();
    let pts = generate_collision_points(&m).unwrap();
    let eps = 0.08;
    let k = m.coupling_gain;
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        // the gradient is the continuous-path form, so the path is sampled
        // finely against the cost band
        let len = 1.0;
        let traj = wavy_over(&mut rng, &m, 800, len, PinMask::all());
        // a ball brushing the right side edge mid-path
        let ball = Ball {
            center: Vector3::new(len / 2.0 + rng.gen_range(-0.1..0.1), -0.6 - rng.gen_range(0.0..0.04), rng.gen_range(0.2..0.3)),
            radius: 0.1,
        };
        let (g, _) = obstacle_gradient(&traj, &ball, &m, &pts, eps).unwrap();
        let f = |t: &Trajectory| obstacle_functional(t, &ball, &m, &pts, eps).unwrap();
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 2..traj.len() - 2 {
            if g[i - 1..=i + 1].iter().all(|v| v.amax() == 0.0) {
                continue;
            }
            // sample i only enters the terms of samples i-1..=i+1, which a
            // five-sample window reproduces exactly
            let window = Trajectory {
                samples: traj.samples[i - 2..=i + 2].to_vec(),
                ..traj.clone()
            };
            for d in 0..5 {
                // z and s move along the coupling line, as the Jacobian does
                let dir: [f64; 5] = match d {
                    2 => [0.0, 0.0, 1.0, 0.0, k],
                    4 => [0.0, 0.0, 1.0 / k, 0.0, 1.0],
                    _ => std::array::from_fn(|j| f64::from(u8::from(j == d))),
                };
                let shifted = |sign: f64| {
                    let mut t = window.clone();
                    let mut v = t.samples[2].to_array();
                    for j in 0..5 {
                        v[j] += sign * h * dir[j];
                    }
                    t.samples[2] = Configuration::from_array(v);
                    f(&t)
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
                // the assembled gradient is per unit time
                let an = g[i][d] * traj.dt;
                diff2 += (an - fd).powi(2);
                norm2 += fd * fd;
            }
        }
        assert!(norm2 > 0.0, "ball never reached the cost band");
        let rel = (diff2 / norm2).sqrt();
        assert!(rel < 1e-3, "relative error {rel:e}");
    }
}

fn linear(traj: &Trajectory) -> Vec<Vector5> {
    let n = traj.len();
    let a = traj.samples[0].to_vector();
    let b = traj.samples[n - 1].to_vector();
    (0..n).map(|i| a + (b - a) * (i as f64 / (n - 1) as f64)).collect()
}

#[test]
fn smoothing_alone_reaches_the_interpolant() {
    let m = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut traj = wavy(&mut rng, &m, 30, PinMask::all());
    let target = linear(&traj);
    let norm = SmoothNorm::new(traj.len(), traj.dt, &traj.pinned).unwrap();
    let mut it = 0;
    let worst = |t: &Trajectory| {
        t.samples
            .iter()
            .zip(&target)
            .map(|(c, l)| (c.to_vector() - l).amax())
            .fold(0.0, f64::max)
    };
    while worst(&traj) >= 1e-6 {
        it += 1;
        assert!(it < 10_000, "no convergence, deviation {}", worst(&traj));
        let g = smoothness_gradient(&traj);
        step(&mut traj, &g, &norm, 10.0, f64::INFINITY, &m, it).unwrap();
    }
}

#[test]
fn step_scales_inversely_with_eta() {
    let m = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = wavy(&mut rng, &m, 30, PinMask::default());
    let norm = SmoothNorm::new(base.len(), base.dt, &base.pinned).unwrap();
    let g: Vec<Vector5> = (0..base.len()).map(|_| Vector5::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
    let moved = |eta: f64| {
        let mut t = base.clone();
        step(&mut t, &g, &norm, eta, f64::INFINITY, &m, 1).unwrap();
        t.samples
            .iter()
            .zip(&base.samples)
            .map(|(a, b)| a.to_vector() - b.to_vector())
            .collect::<Vec<_>>()
    };
    let small = moved(2.0e4);
    let smaller = moved(4.0e4);
    for (a, b) in small.iter().zip(&smaller) {
        assert!((a - b * 2.0).amax() < 1e-12);
    }
}

proptest! {
    #[test]
    fn pinned_entries_never_move(seed in 0u64..500, steps in 1usize..40, eta in 1.0..1000.0f64) {
        let m = RobotModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut traj = wavy(&mut rng, &m, 20, PinMask::default());
        let first = traj.samples[0];
        let last = traj.samples[19];
        let norm = SmoothNorm::new(20, traj.dt, &traj.pinned).unwrap();
        for it in 0..steps {
            let g: Vec<Vector5> = (0..20).map(|_| Vector5::from_fn(|_, _| rng.gen_range(-50.0..50.0))).collect();
            step(&mut traj, &g, &norm, eta, 0.5, &m, it).unwrap();
        }
        let (a, b) = (traj.samples[0], traj.samples[19]);
        prop_assert_eq!(a.to_array().map(f64::to_bits), first.to_array().map(f64::to_bits));
        prop_assert_eq!([b.x, b.y, b.phi].map(f64::to_bits), [last.x, last.y, last.phi].map(f64::to_bits));
    }

    #[test]
    fn posture_stays_within_limits(seed in 0u64..500, scale in 1.0..1e4f64) {
        let m = RobotModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut traj = wavy(&mut rng, &m, 20, PinMask::default());
        let norm = SmoothNorm::new(20, traj.dt, &traj.pinned).unwrap();
        for it in 0..5 {
            let g: Vec<Vector5> = (0..20).map(|_| Vector5::from_fn(|_, _| rng.gen_range(-scale..scale))).collect();
            step(&mut traj, &g, &norm, 1.0, f64::INFINITY, &m, it).unwrap();
        }
        for c in &traj.samples {
            prop_assert!(c.z >= m.z_min && c.z <= m.z_max);
            prop_assert!(c.s >= m.s_min && c.s <= m.s_max);
        }
    }
}

#[test]
fn empty_world_gives_straight_line() {
    let m = RobotModel::default();
    let start = Configuration::nominal(&m, 0.0, 0.0, 0.0);
    let goal = Configuration::nominal(&m, 3.0, 0.0, 0.0);
    let r = plan(&start, &goal, &Open, &m, &PlannerParams::default()).unwrap();
    assert!(r.converged && r.iterations <= 10, "{} iterations", r.iterations);
    assert!(r.collision_free);
    let reference = init_trajectory(&start, &goal, &PlannerParams::default(), PinMask::default()).unwrap();
    for (a, b) in r.trajectory.samples.iter().zip(&reference.samples) {
        assert!((a.to_vector() - b.to_vector()).amax() < 1e-9);
    }
}

#[test]
fn plans_are_deterministic_across_threads() {
    let m = RobotModel::default();
    let start = Configuration::nominal(&m, 0.0, 0.0, 0.0);
    let goal = Configuration::nominal(&m, 2.0, 0.0, 0.0);
    let ball = Ball {
        center: Vector3::new(1.0, -0.55, 0.25),
        radius: 0.1,
    };
    let params = PlannerParams::default();
    let reference = plan(&start, &goal, &ball, &m, &params).unwrap();
    assert!(reference.iterations > 1);
    let runs: Vec<_> = (0..4)
        .into_par_iter()
        .map(|_| plan(&start, &goal, &ball, &m, &params).unwrap().trajectory)
        .collect();
    for t in runs {
        assert_eq!(t, reference.trajectory);
    }
}
