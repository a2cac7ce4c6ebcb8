//! Deformable bounding-box abstraction of a legged robot body.
//!
//! The box has a fixed length `l0` and height `h0` and a variable half-width
//! (the *span* `s`). Its frame sits at the center of the bottom face, so the
//! box only extends upward; the legs are not part of the box. A robot state
//! along a trajectory is the 5-D [`Configuration`] `(x, y, z, phi, s)`.
//!
//! Collision checking is done on points placed along the twelve box edges.
//! Each point is described by coefficients `(cx, cy, cz)` that scale the box
//! half-length, the span and the height respectively.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of configuration dimensions: x, y, z, phi, s.
pub const DOF: usize = 5;

/// Edge spacing between collision points, as a multiple of the point radius.
pub const EDGE_SPACING_FACTOR: f64 = 1.5;

pub type Vector5 = SVector<f64, DOF>;
pub type PointJacobian = SMatrix<f64, 3, DOF>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

/// Wraps an angle to `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// One trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub x: f64,
    pub y: f64,
    /// Ground clearance of the box bottom face.
    pub z: f64,
    pub phi: f64,
    /// Half the box width.
    pub s: f64,
}

impl Configuration {
    pub fn new(x: f64, y: f64, z: f64, phi: f64, s: f64) -> Self {
        Self { x, y, z, phi, s }
    }

    /// Nominal walking posture at a planar pose.
    pub fn nominal(model: &RobotModel, x: f64, y: f64, phi: f64) -> Self {
        Self::new(x, y, model.z_nom, normalize_angle(phi), model.s_nom)
    }

    pub fn to_array(&self) -> [f64; DOF] {
        [self.x, self.y, self.z, self.phi, self.s]
    }

    pub fn from_array(v: [f64; DOF]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn to_vector(&self) -> Vector5 {
        Vector5::from(self.to_array())
    }

    /// Returns a copy with yaw normalized and z, s clamped to the model limits.
    pub fn clamped(&self, model: &RobotModel) -> Self {
        Self {
            z: self.z.clamp(model.z_min, model.z_max),
            s: self.s.clamp(model.s_min, model.s_max),
            phi: normalize_angle(self.phi),
            ..*self
        }
    }

    pub fn with_span_offset(&self, offset: f64) -> Self {
        Self {
            s: self.s + offset,
            ..*self
        }
    }

    /// Top of the bounding box above the ground.
    pub fn total_height(&self, model: &RobotModel) -> f64 {
        self.z + model.h0
    }
}

/// Fixed dimensions, posture limits and the linear span/height coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotModel {
    pub l0: f64,
    pub h0: f64,
    pub s_nom: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub z_nom: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// ds/dz, non-positive: raising the body narrows the span.
    pub coupling_gain: f64,
    pub collision_radius: f64,
    /// Width margin added to the span before collision checking (leg swing).
    pub span_offset: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        let s_nom = 0.41;
        let s_min = s_nom - 0.159;
        let z_nom = 0.186;
        let z_max = z_nom + 0.113;
        Self {
            l0: 0.6,
            h0: 0.141,
            s_nom,
            s_min,
            s_max: s_nom + 0.06,
            z_nom,
            z_min: 0.0,
            z_max,
            coupling_gain: -(s_nom - s_min) / (z_max - z_nom),
            collision_radius: 0.05,
            span_offset: 0.04,
        }
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidModel(m.to_string()));
        let all = [
            self.l0,
            self.h0,
            self.s_nom,
            self.s_min,
            self.s_max,
            self.z_nom,
            self.z_min,
            self.z_max,
            self.coupling_gain,
            self.collision_radius,
            self.span_offset,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.l0 <= 0.0 || self.h0 <= 0.0 || self.collision_radius <= 0.0 {
            return bad("l0, h0 and collision_radius must be positive");
        }
        if !(self.z_min <= self.z_nom && self.z_nom <= self.z_max) {
            return bad("require z_min <= z_nom <= z_max");
        }
        if !(0.0 < self.s_min && self.s_min <= self.s_nom && self.s_nom <= self.s_max) {
            return bad("require 0 < s_min <= s_nom <= s_max");
        }
        if self.coupling_gain > 0.0 {
            return bad("coupling_gain must be <= 0");
        }
        if self.span_offset < 0.0 {
            return bad("span_offset must be >= 0");
        }
        Ok(())
    }

    /// Nominal box width used to lay out collision points.
    pub fn layout_width(&self) -> f64 {
        2.0 * (self.s_nom + self.span_offset)
    }

    pub fn nominal_height(&self) -> f64 {
        self.z_nom + self.h0
    }

    /// dz/ds of the linear coupling; zero when decoupled.
    pub fn dz_ds(&self) -> f64 {
        if self.coupling_gain == 0.0 {
            0.0
        } else {
            1.0 / self.coupling_gain
        }
    }

    pub fn span_of_z(&self, z: f64) -> f64 {
        (self.s_nom + self.coupling_gain * (z - self.z_nom)).clamp(self.s_min, self.s_max)
    }

    /// Inverse of [`span_of_z`](Self::span_of_z) on its unclamped segment.
    /// With no coupling the height is undetermined and `z_nom` is returned.
    pub fn z_of_s(&self, s: f64) -> f64 {
        if self.coupling_gain == 0.0 {
            return self.z_nom;
        }
        (self.z_nom + (s - self.s_nom) / self.coupling_gain).clamp(self.z_min, self.z_max)
    }
}

/// Point on the box surface, located by its box coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionPoint {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub radius: f64,
}

impl CollisionPoint {
    pub fn new(cx: f64, cy: f64, cz: f64, radius: f64) -> Self {
        Self { cx, cy, cz, radius }
    }

    /// Offset from the body frame for a given span.
    pub fn body_offset(&self, model: &RobotModel, s: f64) -> Vector3<f64> {
        Vector3::new(self.cx * 0.5 * model.l0, self.cy * s, self.cz * model.h0)
    }
}

fn edge_samples(length: f64, spacing: f64) -> usize {
    // +1 for the closing endpoint; tiny slack so exact multiples do not round up
    (length / spacing - 1e-9).ceil().max(1.0) as usize + 1
}

/// Lays collision points along all twelve box edges.
///
/// Points on an edge are evenly spaced at most `EDGE_SPACING_FACTOR * radius`
/// apart, endpoints included. The eight vertices come first, followed by
/// the interior points of the length, width and height edges.
pub fn generate_collision_points(model: &RobotModel) -> Result<Vec<CollisionPoint>, GeometryError> {
    model.validate()?;
    let r = model.collision_radius;
    let width = model.layout_width();
    let min_dim = model.l0.min(model.h0).min(width);
    if 2.0 * r >= min_dim {
        return Err(GeometryError::InvalidModel(format!(
            "collision radius {r} too large for smallest box dimension {min_dim}"
        )));
    }
    let spacing = EDGE_SPACING_FACTOR * r;
    let nx = edge_samples(model.l0, spacing);
    let ny = edge_samples(width, spacing);
    let nz = edge_samples(model.h0, spacing);
    // interior coefficients along an edge of n samples spanning [lo, hi]
    let interior = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (1..n - 1)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect()
    };

    let mut pts = Vec::new();
    for &cz in &[0.0, 1.0] {
        for &cy in &[-1.0, 1.0] {
            for &cx in &[-1.0, 1.0] {
                pts.push(CollisionPoint::new(cx, cy, cz, r));
            }
        }
    }
    for cx in interior(nx, -1.0, 1.0) {
        for &cz in &[0.0, 1.0] {
            for &cy in &[-1.0, 1.0] {
                pts.push(CollisionPoint::new(cx, cy, cz, r));
            }
        }
    }
    for cy in interior(ny, -1.0, 1.0) {
        for &cz in &[0.0, 1.0] {
            for &cx in &[-1.0, 1.0] {
                pts.push(CollisionPoint::new(cx, cy, cz, r));
            }
        }
    }
    for cz in interior(nz, 0.0, 1.0) {
        for &cy in &[-1.0, 1.0] {
            for &cx in &[-1.0, 1.0] {
                pts.push(CollisionPoint::new(cx, cy, cz, r));
            }
        }
    }
    Ok(pts)
}

pub fn yaw_rotation(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Derivative of [`yaw_rotation`] with respect to yaw.
pub fn yaw_rotation_derivative(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Map-frame position of a collision point. Uses `cfg.s` as given.
pub fn collision_point_world(cfg: &Configuration, pt: &CollisionPoint, model: &RobotModel) -> Vector3<f64> {
    Vector3::new(cfg.x, cfg.y, cfg.z) + yaw_rotation(cfg.phi) * pt.body_offset(model, cfg.s)
}

/// Position Jacobian of a collision point with respect to `(x, y, z, phi, s)`.
///
/// The z and s columns carry the coupling cross terms: moving z shifts the
/// lateral offset by `cy * ds/dz`, moving s shifts the body height by `dz/ds`.
pub fn collision_point_jacobian(cfg: &Configuration, pt: &CollisionPoint, model: &RobotModel) -> PointJacobian {
    let rot = yaw_rotation(cfg.phi);
    let offset = pt.body_offset(model, cfg.s);
    let lateral = rot * Vector3::new(0.0, pt.cy, 0.0);
    let dz = Vector3::z() + lateral * model.coupling_gain;
    let dphi = yaw_rotation_derivative(cfg.phi) * offset;
    let ds = lateral + Vector3::z() * model.dz_ds();
    let mut j = PointJacobian::zeros();
    j[(0, 0)] = 1.0;
    j[(1, 1)] = 1.0;
    j.set_column(2, &dz);
    j.set_column(3, &dphi);
    j.set_column(4, &ds);
    j
}

/// Which dimensions of the first and last samples are held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinMask {
    pub start: [bool; DOF],
    pub goal: [bool; DOF],
}

impl Default for PinMask {
    /// Start fully pinned; goal pins x, y and yaw but leaves posture free.
    fn default() -> Self {
        Self {
            start: [true; DOF],
            goal: [true, true, false, true, false],
        }
    }
}

impl PinMask {
    pub fn all() -> Self {
        Self {
            start: [true; DOF],
            goal: [true; DOF],
        }
    }

    pub fn is_pinned(&self, index: usize, len: usize, dim: usize) -> bool {
        (index == 0 && self.start[dim]) || (index + 1 == len && self.goal[dim])
    }
}

/// Fixed-count, uniformly timed sequence of configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Configuration>,
    pub dt: f64,
    pub pinned: PinMask,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.samples.len().saturating_sub(1)) as f64
    }

    /// Linear interpolation in time; yaw interpolates along the shorter arc.
    pub fn sample_at(&self, t: f64) -> Configuration {
        let n = self.samples.len();
        if n == 1 || t <= 0.0 {
            return self.samples[0];
        }
        let u = t / self.dt;
        if u >= (n - 1) as f64 {
            return self.samples[n - 1];
        }
        let i = u.floor() as usize;
        let f = u - i as f64;
        let a = &self.samples[i];
        let b = &self.samples[i + 1];
        let lerp = |p: f64, q: f64| p + (q - p) * f;
        Configuration::new(
            lerp(a.x, b.x),
            lerp(a.y, b.y),
            lerp(a.z, b.z),
            normalize_angle(a.phi + normalize_angle(b.phi - a.phi) * f),
            lerp(a.s, b.s),
        )
    }

    /// Cumulative planar path length at each sample.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.samples.len());
        let mut acc = 0.0;
        for (i, c) in self.samples.iter().enumerate() {
            if i > 0 {
                let p = &self.samples[i - 1];
                acc += (c.x - p.x).hypot(c.y - p.y);
            }
            out.push(acc);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_model_yields_84_points() {
        let model = RobotModel::default();
        assert!((model.layout_width() - 0.9).abs() < 1e-12);
        let pts = generate_collision_points(&model).unwrap();
        assert_eq!(pts.len(), 84);
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let model = RobotModel {
            collision_radius: 0.3,
            ..RobotModel::default()
        };
        assert!(matches!(
            generate_collision_points(&model),
            Err(GeometryError::InvalidModel(_))
        ));
    }

    #[test]
    fn vertices_present_and_no_duplicates() {
        let pts = generate_collision_points(&RobotModel::default()).unwrap();
        for &cz in &[0.0, 1.0] {
            for &cy in &[-1.0, 1.0] {
                for &cx in &[-1.0, 1.0] {
                    assert!(pts.iter().any(|p| p.cx == cx && p.cy == cy && p.cz == cz));
                }
            }
        }
        let keys: HashSet<_> = pts
            .iter()
            .map(|p| ((p.cx * 1e9) as i64, (p.cy * 1e9) as i64, (p.cz * 1e9) as i64))
            .collect();
        assert_eq!(keys.len(), pts.len());
    }

    #[test]
    fn edge_spacing_within_two_radii() {
        let model = RobotModel::default();
        let pts = generate_collision_points(&model).unwrap();
        let cfg = Configuration::nominal(&model, 0.0, 0.0, 0.0).with_span_offset(model.span_offset);
        let pos: Vec<_> = pts.iter().map(|p| collision_point_world(&cfg, p, &model)).collect();
        // every point has a neighbour on its edge no further than 2r
        for (i, a) in pos.iter().enumerate() {
            let nearest = pos
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| (a - b).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 2.0 * model.collision_radius + 1e-12);
        }
    }

    #[test]
    fn point_set_symmetric() {
        let pts = generate_collision_points(&RobotModel::default()).unwrap();
        let has = |cx: f64, cy: f64, cz: f64| {
            pts.iter()
                .any(|p| (p.cx - cx).abs() < 1e-12 && (p.cy - cy).abs() < 1e-12 && (p.cz - cz).abs() < 1e-12)
        };
        for p in &pts {
            assert!(has(-p.cx, p.cy, p.cz));
            assert!(has(p.cx, -p.cy, p.cz));
        }
    }

    #[test]
    fn span_line_through_nominal() {
        let m = RobotModel::default();
        assert!((m.span_of_z(m.z_nom) - m.s_nom).abs() < 1e-15);
        assert!((m.span_of_z(0.299) - 0.251).abs() < 1e-12);
        let flat = RobotModel {
            coupling_gain: 0.0,
            ..m
        };
        for z in [0.0, 0.1, 0.2, 0.299] {
            assert_eq!(flat.span_of_z(z), flat.s_nom);
        }
    }

    #[test]
    fn span_inverse_on_unclamped_segment() {
        let m = RobotModel::default();
        for k in 0..=50 {
            let z = m.z_nom + (m.z_max - m.z_nom) * k as f64 / 50.0;
            assert!((m.z_of_s(m.span_of_z(z)) - z).abs() < 1e-12);
        }
    }

    #[test]
    fn world_position_examples() {
        let m = RobotModel::default();
        let s = 0.4;
        let cfg = Configuration::new(0.0, 0.0, 0.0, 0.0, s);
        // front-right-top vertex sits at (l0/2, -s, h0)
        let p = collision_point_world(&cfg, &CollisionPoint::new(1.0, -1.0, 1.0, 0.05), &m);
        assert!((p - Vector3::new(m.l0 / 2.0, -s, m.h0)).norm() < 1e-15);
        let o = collision_point_world(&cfg, &CollisionPoint::new(0.0, 0.0, 0.0, 0.05), &m);
        assert_eq!(o, Vector3::zeros());

        let m2 = RobotModel {
            l0: 0.6,
            h0: 0.3,
            ..m
        };
        let cfg2 = Configuration::new(1.0, 2.0, 0.5, std::f64::consts::FRAC_PI_2, 0.4);
        let pt = CollisionPoint::new(1.0, -1.0, 1.0, 0.05);
        let p2 = collision_point_world(&cfg2, &pt, &m2);
        assert!((p2 - Vector3::new(1.4, 2.3, 0.8)).norm() < 1e-12);

        let flat = RobotModel {
            coupling_gain: 0.0,
            ..m2
        };
        let j = collision_point_jacobian(&cfg2, &pt, &flat);
        assert!((j.column(3) - Vector3::new(-0.3, 0.4, 0.0)).norm() < 1e-12);
        assert!((j.column(2) - Vector3::z()).norm() < 1e-15);
        assert!((j.column(4) - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn first_two_jacobian_columns_are_identity() {
        let m = RobotModel::default();
        let pts = generate_collision_points(&m).unwrap();
        let cfg = Configuration::new(0.3, -1.2, 0.2, 2.0, 0.35);
        for p in &pts {
            let j = collision_point_jacobian(&cfg, p, &m);
            assert_eq!(j.column(0).into_owned(), Vector3::x());
            assert_eq!(j.column(1).into_owned(), Vector3::y());
        }
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5 - 4.0 * PI) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clamp_keeps_limits() {
        let m = RobotModel::default();
        let c = Configuration::new(0.0, 0.0, 5.0, 7.0, -1.0).clamped(&m);
        assert_eq!(c.z, m.z_max);
        assert_eq!(c.s, m.s_min);
        assert!(c.phi > -PI && c.phi <= PI);
    }

    #[test]
    fn trajectory_sampling_interpolates() {
        let traj = Trajectory {
            samples: vec![
                Configuration::new(0.0, 0.0, 0.2, 0.0, 0.4),
                Configuration::new(1.0, 0.0, 0.1, 0.0, 0.3),
            ],
            dt: 2.0,
            pinned: PinMask::default(),
        };
        let mid = traj.sample_at(1.0);
        assert!((mid.x - 0.5).abs() < 1e-15 && (mid.z - 0.15).abs() < 1e-15);
        assert_eq!(traj.sample_at(10.0), traj.samples[1]);
        assert_eq!(traj.arc_lengths(), vec![0.0, 1.0]);
    }
}
