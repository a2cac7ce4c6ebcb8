//! Raycasting depth camera with range-dependent Gaussian noise.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Configuration;
use crate::mapping::DepthMeasurement;
use crate::sim::world::World;

/// Hit points are pushed this far past the surface so they bin into the
/// obstacle's cell rather than the free cell in front of it.
const SURFACE_NUDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorModel {
    pub hfov: f64,
    pub vfov: f64,
    pub cols: usize,
    pub rows: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Range noise standard deviation is `noise_coeff * d^2`.
    pub noise_coeff: f64,
    /// Lower bound on the reported measurement variance.
    pub min_variance: f64,
    /// Mount position in the body frame (m).
    pub mount: [f64; 3],
    /// Downward pitch of the optical axis (rad).
    pub pitch: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            hfov: 1.518,
            vfov: 1.012,
            cols: 80,
            rows: 60,
            min_range: 0.2,
            max_range: 2.5,
            noise_coeff: 0.003,
            min_variance: 1e-6,
            mount: [0.3, 0.0, 0.141],
            pitch: 0.35,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_range > 0.0 && self.min_range < self.max_range) {
            return Err("sensor ranges must satisfy 0 < min_range < max_range".into());
        }
        if self.cols == 0 || self.rows == 0 || !(self.hfov > 0.0) || !(self.vfov > 0.0) {
            return Err("sensor needs a positive field of view and at least one ray".into());
        }
        if self.noise_coeff < 0.0 || !(self.min_variance > 0.0) {
            return Err("noise_coeff must be non-negative and min_variance positive".into());
        }
        Ok(())
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_coeff = 0.0;
        self
    }

    /// Range variance reported for a hit at distance `d`.
    pub fn variance_at(&self, d: f64) -> f64 {
        let sigma = self.noise_coeff * d * d;
        (sigma * sigma).max(self.min_variance)
    }

    /// Optical center in the map frame.
    pub fn origin(&self, pose: &Configuration) -> Vector3<f64> {
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), pose.phi);
        Vector3::new(pose.x, pose.y, pose.z) + yaw * Vector3::from(self.mount)
    }

    /// Unit ray directions in the map frame, row-major from the bottom-left.
    pub fn ray_directions(&self, yaw: f64) -> Vec<Vector3<f64>> {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), self.pitch);
        let mut dirs = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let el = -self.vfov / 2.0 + self.vfov * (r as f64 + 0.5) / self.rows as f64;
            for c in 0..self.cols {
                let az = self.hfov / 2.0 - self.hfov * (c as f64 + 0.5) / self.cols as f64;
                let d = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                dirs.push(rot * d);
            }
        }
        dirs
    }

    /// Noise-free ranges of every ray; `None` for misses or hits outside the
    /// valid range.
    pub fn cast_rays(&self, world: &World, pose: &Configuration) -> Vec<Option<f64>> {
        let origin = self.origin(pose);
        self.ray_directions(pose.phi)
            .iter()
            .map(|dir| {
                world
                    .raycast(&origin, dir)
                    .filter(|&t| t >= self.min_range && t <= self.max_range)
            })
            .collect()
    }

    /// Simulated depth points for a body pose.
    pub fn render_depth<R: Rng + ?Sized>(
        &self,
        world: &World,
        pose: &Configuration,
        rng: &mut R,
    ) -> Vec<DepthMeasurement> {
        let origin = self.origin(pose);
        let dirs = self.ray_directions(pose.phi);
        let mut out = Vec::with_capacity(dirs.len());
        for (dir, hit) in dirs.iter().zip(self.cast_rays(world, pose)) {
            let Some(t) = hit else { continue };
            let sigma = self.noise_coeff * t * t;
            let noise = if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
            } else {
                0.0
            };
            out.push(DepthMeasurement {
                point: origin + dir * (t + noise + SURFACE_NUDGE),
                variance: self.variance_at(t),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn looking_down() -> SensorModel {
        SensorModel {
            mount: [0.0, 0.0, 1.0],
            pitch: std::f64::consts::FRAC_PI_2,
            hfov: 0.2,
            vfov: 0.2,
            cols: 5,
            rows: 5,
            ..SensorModel::default()
        }
    }

    #[test]
    fn straight_down_hits_at_height() {
        let s = SensorModel {
            cols: 1,
            rows: 1,
            ..looking_down()
        };
        let pose = Configuration::new(0.0, 0.0, 0.0, 0.0, 0.4);
        let r = s.cast_rays(&World::default(), &pose);
        assert!((r[0].unwrap() - 1.0).abs() < 1e-12);
        // off-axis rays are longer by 1 / cos of their angle to vertical
        let s = looking_down();
        for (d, r) in s.ray_directions(0.0).iter().zip(s.cast_rays(&World::default(), &pose)) {
            assert!((r.unwrap() * -d.z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn level_rays_miss_empty_world() {
        let s = SensorModel {
            pitch: 0.0,
            vfov: 1e-6,
            rows: 1,
            ..SensorModel::default()
        };
        let pose = Configuration::new(0.0, 0.0, 0.5, 0.0, 0.4);
        assert!(s.cast_rays(&World::default(), &pose).iter().all(Option::is_none));
    }

    #[test]
    fn render_is_deterministic_per_seed() {
        let s = SensorModel::default();
        let pose = Configuration::new(0.0, 0.0, 0.186, 0.0, 0.41);
        let w = World::default();
        let a = s.render_depth(&w, &pose, &mut ChaCha8Rng::seed_from_u64(3));
        let b = s.render_depth(&w, &pose, &mut ChaCha8Rng::seed_from_u64(3));
        let c = s.render_depth(&w, &pose, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(!a.is_empty());
    }

    #[test]
    fn noise_variance_matches_model() {
        let s = SensorModel {
            cols: 100,
            rows: 100,
            ..looking_down()
        };
        let pose = Configuration::new(0.0, 0.0, 0.0, 0.0, 0.4);
        let origin = s.origin(&pose);
        let truth = s.cast_rays(&World::default(), &pose);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = s.render_depth(&World::default(), &pose, &mut rng);
        assert_eq!(pts.len(), 10_000);
        let errs: Vec<f64> = pts
            .iter()
            .zip(truth)
            .map(|(m, t)| (m.point - origin).norm() - t.unwrap())
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64;
        let expected = (s.noise_coeff * 1.0f64).powi(2);
        assert!((var / expected - 1.0).abs() < 0.2, "{var} vs {expected}");
    }
}
