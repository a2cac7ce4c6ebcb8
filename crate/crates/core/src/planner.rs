//! Covariant functional gradient descent over body pose, height and span.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{obstacle_cost_gradient, DistanceSource, FieldError};
use crate::geometry::{
    collision_point_jacobian, collision_point_world, generate_collision_points, normalize_angle, CollisionPoint,
    Configuration, GeometryError, PinMask, RobotModel, Trajectory, Vector5, DOF,
};

/// Below this workspace speed a collision point is treated as stationary.
const STATIONARY_SPEED: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("start and goal coincide in the plane")]
    ZeroLength,
    #[error("optimization diverged at iteration {0}")]
    Diverged(usize),
    #[error("collision point of waypoint {waypoint} left the distance field: {source}")]
    OutOfBounds { waypoint: usize, source: FieldError },
    #[error("invalid planner parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams {
    pub waypoints: usize,
    pub dt: f64,
    pub eta: f64,
    pub max_iters: usize,
    pub smooth_weight: f64,
    pub obstacle_weight: f64,
    /// Clearance at which the obstacle cost starts.
    pub eps: f64,
    /// Largest per-iteration update (any dimension) counted as converged.
    pub converge_tol: f64,
    /// Cap on the largest entry of one update; larger steps are scaled down
    /// uniformly.
    pub max_update: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            waypoints: 100,
            dt: 0.1,
            eta: 100.0,
            max_iters: 500,
            smooth_weight: 1.0,
            obstacle_weight: 15.0,
            eps: 0.08,
            converge_tol: 1e-4,
            max_update: 0.01,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidParams(m.to_string()));
        if self.waypoints < 3 {
            return bad("waypoints must be at least 3");
        }
        if !(self.dt > 0.0) || !(self.eta > 0.0) || !(self.eps > 0.0) {
            return bad("dt, eta and eps must be positive");
        }
        if !(self.smooth_weight >= 0.0) || !(self.obstacle_weight >= 0.0) {
            return bad("weights must be non-negative");
        }
        if !(self.converge_tol >= 0.0) {
            return bad("converge_tol must be non-negative");
        }
        if !(self.max_update > 0.0) {
            return bad("max_update must be positive");
        }
        Ok(())
    }
}

/// Straight-line initial guess from `start` to `goal` over `params.waypoints`
/// samples. Yaw takes the shorter arc and is left unwrapped.
pub fn init_trajectory(
    start: &Configuration,
    goal: &Configuration,
    params: &PlannerParams,
    pinned: PinMask,
) -> Result<Trajectory, PlanError> {
    params.validate()?;
    if (goal.x - start.x).hypot(goal.y - start.y) < 1e-9 {
        return Err(PlanError::ZeroLength);
    }
    let n = params.waypoints;
    let a = start.to_array();
    let mut b = goal.to_array();
    b[3] = a[3] + normalize_angle(goal.phi - start.phi);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let mut v = [0.0; DOF];
            for d in 0..DOF {
                v[d] = if i == 0 {
                    a[d]
                } else if i == n - 1 {
                    b[d]
                } else {
                    a[d] + (b[d] - a[d]) * t
                };
            }
            Configuration::from_array(v)
        })
        .collect();
    Ok(Trajectory {
        samples,
        dt: params.dt,
        pinned,
    })
}

/// Free index range and Thomas factorization of the smoothness metric for
/// one dimension.
#[derive(Debug, Clone, PartialEq)]
struct DimNorm {
    lo: usize,
    hi: usize,
    upper: Vec<f64>,
    inv_pivot: Vec<f64>,
    off: f64,
}

/// Smoothness metric `A = K^T K`, `K` the finite differencing matrix, kept
/// as one tridiagonal factorization per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothNorm {
    dims: Vec<DimNorm>,
    n: usize,
}

impl SmoothNorm {
    pub fn new(n: usize, dt: f64, pinned: &PinMask) -> Result<Self, PlanError> {
        if n < 3 {
            return Err(PlanError::InvalidParams("waypoints must be at least 3".into()));
        }
        let w = 1.0 / (dt * dt);
        let mut dims = Vec::with_capacity(DOF);
        for d in 0..DOF {
            if !pinned.start[d] && !pinned.goal[d] {
                return Err(PlanError::InvalidParams(format!(
                    "dimension {d} has no pinned endpoint, the smoothness metric is singular"
                )));
            }
            let lo = usize::from(pinned.start[d]);
            let hi = if pinned.goal[d] { n - 2 } else { n - 1 };
            let m = hi - lo + 1;
            let diag: Vec<f64> = (lo..=hi)
                .map(|i| if i == 0 || i == n - 1 { w } else { 2.0 * w })
                .collect();
            let off = -w;
            let mut upper = vec![0.0; m];
            let mut inv_pivot = vec![0.0; m];
            let mut prev_upper = 0.0;
            for k in 0..m {
                let pivot = diag[k] - if k > 0 { off * prev_upper } else { 0.0 };
                inv_pivot[k] = 1.0 / pivot;
                upper[k] = off * inv_pivot[k];
                prev_upper = upper[k];
            }
            dims.push(DimNorm {
                lo,
                hi,
                upper,
                inv_pivot,
                off,
            });
        }
        Ok(Self { dims, n })
    }

    /// Applies `A^-1` to the free entries of a per-waypoint field; pinned
    /// entries come back zero.
    pub fn solve(&self, g: &[Vector5]) -> Vec<Vector5> {
        let mut out = vec![Vector5::zeros(); self.n];
        let mut buf = Vec::with_capacity(self.n);
        for (d, dn) in self.dims.iter().enumerate() {
            buf.clear();
            for (k, i) in (dn.lo..=dn.hi).enumerate() {
                let prev = if k > 0 { buf[k - 1] } else { 0.0 };
                buf.push((g[i][d] - dn.off * prev) * dn.inv_pivot[k]);
            }
            for k in (0..buf.len().saturating_sub(1)).rev() {
                buf[k] -= dn.upper[k] * buf[k + 1];
            }
            for (k, i) in (dn.lo..=dn.hi).enumerate() {
                out[i][d] = buf[k];
            }
        }
        out
    }
}

/// Smoothness gradient: the negated second difference at interior samples,
/// zero at both endpoints and in pinned dimensions. A free endpoint is
/// therefore only moved through the metric, never pulled flat.
pub fn smoothness_gradient(traj: &Trajectory) -> Vec<Vector5> {
    let n = traj.len();
    let w = 1.0 / (traj.dt * traj.dt);
    let v: Vec<Vector5> = traj.samples.iter().map(Configuration::to_vector).collect();
    let mut g = vec![Vector5::zeros(); n];
    for i in 1..n - 1 {
        let raw = (v[i] * 2.0 - v[i - 1] - v[i + 1]) * w;
        for d in 0..DOF {
            if !traj.pinned.is_pinned(i, n, d) {
                g[i][d] = raw[d];
            }
        }
    }
    g
}

/// Discretized smoothness functional `1/2 sum |xi'|^2 dt`.
pub fn smoothness_functional(traj: &Trajectory) -> f64 {
    traj.samples
        .windows(2)
        .map(|w| {
            let d = (w[1].to_vector() - w[0].to_vector()) / traj.dt;
            0.5 * d.norm_squared() * traj.dt
        })
        .sum()
}

fn world_points(traj: &Trajectory, pt: &CollisionPoint, model: &RobotModel) -> Vec<Vector3<f64>> {
    traj.samples
        .iter()
        .map(|c| collision_point_world(&c.with_span_offset(model.span_offset), pt, model))
        .collect()
}

/// Workspace velocity and acceleration of one point at sample `i`.
fn point_derivatives(x: &[Vector3<f64>], i: usize, dt: f64) -> (Vector3<f64>, Vector3<f64>) {
    let n = x.len();
    if i == 0 {
        ((x[1] - x[0]) / dt, Vector3::zeros())
    } else if i == n - 1 {
        ((x[n - 1] - x[n - 2]) / dt, Vector3::zeros())
    } else {
        (
            (x[i + 1] - x[i - 1]) / (2.0 * dt),
            (x[i + 1] - x[i] * 2.0 + x[i - 1]) / (dt * dt),
        )
    }
}

/// Obstacle functional gradient and value.
///
/// Each collision point contributes `J^T |X'| [(I - X^ X^T) grad c - c k]`
/// with `k` the workspace curvature, so the update never slows the motion
/// along the path. A point that is not moving falls back to `J^T grad c`.
pub fn obstacle_gradient<F: DistanceSource + ?Sized>(
    traj: &Trajectory,
    field: &F,
    model: &RobotModel,
    points: &[CollisionPoint],
    eps: f64,
) -> Result<(Vec<Vector5>, f64), PlanError> {
    let n = traj.len();
    let dt = traj.dt;
    let mut g = vec![Vector5::zeros(); n];
    let mut functional = 0.0;
    for pt in points {
        let x = world_points(traj, pt, model);
        for i in 0..n {
            let (c, grad_c) = obstacle_cost_gradient(field, &x[i], eps)
                .map_err(|source| PlanError::OutOfBounds { waypoint: i, source })?;
            if c == 0.0 && grad_c == Vector3::zeros() {
                continue;
            }
            let (vel, acc) = point_derivatives(&x, i, dt);
            let speed = vel.norm();
            functional += c * speed * dt;
            let cfg = traj.samples[i].with_span_offset(model.span_offset);
            let jac = collision_point_jacobian(&cfg, pt, model);
            let work = if speed < STATIONARY_SPEED {
                grad_c
            } else {
                let dir = vel / speed;
                let projected = grad_c - dir * dir.dot(&grad_c);
                let kappa = (acc - dir * dir.dot(&acc)) / (speed * speed);
                (projected - kappa * c) * speed
            };
            g[i] += jac.transpose() * work;
        }
    }
    for (i, gi) in g.iter_mut().enumerate() {
        for d in 0..DOF {
            if traj.pinned.is_pinned(i, n, d) {
                gi[d] = 0.0;
            }
        }
    }
    Ok((g, functional))
}

/// Discretized obstacle functional `sum_i sum_j c(d_ij) |X'_ij| dt`.
pub fn obstacle_functional<F: DistanceSource + ?Sized>(
    traj: &Trajectory,
    field: &F,
    model: &RobotModel,
    points: &[CollisionPoint],
    eps: f64,
) -> Result<f64, PlanError> {
    let mut total = 0.0;
    for pt in points {
        let x = world_points(traj, pt, model);
        for i in 0..x.len() {
            let d = field
                .distance(&x[i])
                .map_err(|source| PlanError::OutOfBounds { waypoint: i, source })?;
            let (c, _) = crate::field::obstacle_cost(d, eps);
            if c > 0.0 {
                total += c * point_derivatives(&x, i, traj.dt).0.norm() * traj.dt;
            }
        }
    }
    Ok(total)
}

/// One update `xi <- xi - (1/eta) A^-1 grad`, scaled down when its largest
/// entry exceeds `max_update`, then z and s are clamped. Returns the largest
/// absolute change of any entry.
pub fn step(
    traj: &mut Trajectory,
    grad: &[Vector5],
    norm: &SmoothNorm,
    eta: f64,
    max_update: f64,
    model: &RobotModel,
    iteration: usize,
) -> Result<f64, PlanError> {
    if grad.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(PlanError::Diverged(iteration));
    }
    let delta = norm.solve(grad);
    let n = traj.len();
    let pinned = traj.pinned;
    let mut largest: f64 = 0.0;
    for (i, dv) in delta.iter().enumerate() {
        for d in (0..DOF).filter(|&d| !pinned.is_pinned(i, n, d)) {
            largest = largest.max(dv[d].abs() / eta);
        }
    }
    let scale = if largest > max_update { max_update / largest } else { 1.0 };
    let mut max_change: f64 = 0.0;
    for (i, (cfg, dv)) in traj.samples.iter_mut().zip(&delta).enumerate() {
        let old = *cfg;
        let mut v = cfg.to_array();
        for d in 0..DOF {
            if !traj.pinned.is_pinned(i, n, d) {
                v[d] -= scale * dv[d] / eta;
            }
        }
        let mut next = Configuration::from_array(v);
        if !traj.pinned.is_pinned(i, n, 2) {
            next.z = next.z.clamp(model.z_min, model.z_max);
        }
        if !traj.pinned.is_pinned(i, n, 4) {
            next.s = next.s.clamp(model.s_min, model.s_max);
        }
        let change = (next.to_vector() - old.to_vector()).amax();
        if !change.is_finite() {
            return Err(PlanError::Diverged(iteration));
        }
        max_change = max_change.max(change);
        *cfg = next;
    }
    Ok(max_change)
}

/// Clearance `d - radius` of every sample, minimized over collision points.
pub fn clearance_profile<F: DistanceSource + ?Sized>(
    traj: &Trajectory,
    field: &F,
    model: &RobotModel,
    points: &[CollisionPoint],
) -> Result<Vec<f64>, PlanError> {
    traj.samples
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cfg = c.with_span_offset(model.span_offset);
            points.iter().try_fold(f64::INFINITY, |acc, pt| {
                let p = collision_point_world(&cfg, pt, model);
                let d = field
                    .distance(&p)
                    .map_err(|source| PlanError::OutOfBounds { waypoint: i, source })?;
                Ok(acc.min(d - pt.radius))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub converged: bool,
    pub min_clearance: f64,
    pub clearance: Vec<f64>,
    pub collision_free: bool,
    pub plan_time: f64,
    pub sdf_build_time: f64,
    pub obstacle_cost: f64,
    pub smoothness_cost: f64,
}

impl PlanResult {
    /// Rows `t,x,y,z,phi,s,min_clearance`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,z,phi,s,min_clearance\n");
        for (i, (c, cl)) in self.trajectory.samples.iter().zip(&self.clearance).enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                i as f64 * self.trajectory.dt,
                c.x,
                c.y,
                c.z,
                c.phi,
                c.s,
                cl
            );
        }
        out
    }
}

/// Optimizes a trajectory from `start` to `goal` through `field`.
///
/// The start is pinned completely. The goal pins position and yaw; its
/// height and span start at the nominal posture and are optimized.
pub fn plan<F: DistanceSource + ?Sized>(
    start: &Configuration,
    goal: &Configuration,
    field: &F,
    model: &RobotModel,
    params: &PlannerParams,
) -> Result<PlanResult, PlanError> {
    let timer = Instant::now();
    let points = generate_collision_points(model)?;
    let goal = Configuration {
        z: model.z_nom,
        s: model.s_nom,
        ..*goal
    };
    let mut traj = init_trajectory(start, &goal, params, PinMask::default())?;
    let norm = SmoothNorm::new(traj.len(), traj.dt, &traj.pinned)?;

    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iters {
        iterations += 1;
        let gs = smoothness_gradient(&traj);
        let (go, _) = obstacle_gradient(&traj, field, model, &points, params.eps)?;
        let total: Vec<Vector5> = gs
            .iter()
            .zip(&go)
            .map(|(a, b)| a * params.smooth_weight + b * params.obstacle_weight)
            .collect();
        let change = step(&mut traj, &total, &norm, params.eta, params.max_update, model, iterations)?;
        if change < params.converge_tol {
            converged = true;
            break;
        }
    }

    let clearance = clearance_profile(&traj, field, model, &points)?;
    let min_clearance = clearance.iter().copied().fold(f64::INFINITY, f64::min);
    let obstacle_cost = obstacle_functional(&traj, field, model, &points, params.eps)?;
    let smoothness_cost = smoothness_functional(&traj);
    for c in &mut traj.samples {
        c.phi = normalize_angle(c.phi);
    }
    Ok(PlanResult {
        trajectory: traj,
        iterations,
        converged,
        min_clearance,
        clearance,
        collision_free: min_clearance >= 0.0,
        plan_time: timer.elapsed().as_secs_f64(),
        sdf_build_time: 0.0,
        obstacle_cost,
        smoothness_cost,
    })
}

/// Share of the feasible posture change used, in percent.
pub fn posture_percentage(value: f64, nominal: f64, limit: f64) -> f64 {
    if limit == nominal {
        return 0.0;
    }
    100.0 * (nominal - value) / (nominal - limit)
}

/// Posture extremes along a path expressed as adaptation percentages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Adaptation {
    /// Lowering of the box top toward the minimum total height.
    pub height: f64,
    /// Narrowing of the span toward `s_min`.
    pub span: f64,
    /// Raising of the box bottom toward `z_max`.
    pub clearance: f64,
}

impl Adaptation {
    pub fn of_path(samples: &[Configuration], model: &RobotModel) -> Self {
        let min_top = samples.iter().map(|c| c.z + model.h0).fold(f64::INFINITY, f64::min);
        let min_s = samples.iter().map(|c| c.s).fold(f64::INFINITY, f64::min);
        let max_z = samples.iter().map(|c| c.z).fold(f64::NEG_INFINITY, f64::max);
        Self {
            height: posture_percentage(min_top, model.nominal_height(), model.z_min + model.h0).max(0.0),
            span: posture_percentage(min_s, model.s_nom, model.s_min).max(0.0),
            clearance: posture_percentage(max_z, model.z_nom, model.z_max).max(0.0),
        }
    }

    pub fn max(&self) -> f64 {
        self.height.max(self.span).max(self.clearance)
    }
}
