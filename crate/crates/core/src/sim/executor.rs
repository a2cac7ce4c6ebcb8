//! Kinematic proportional path follower with ground-truth contact logging.

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, CollisionPoint, Configuration, RobotModel, Trajectory, DOF};
use crate::sim::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutorParams {
    pub kp: f64,
    /// Velocity caps for x, y, z, yaw and span.
    pub max_velocity: [f64; DOF],
    pub step: f64,
    /// Extra time spent holding the final reference.
    pub settle_time: f64,
}

impl Default for ExecutorParams {
    fn default() -> Self {
        Self {
            kp: 2.0,
            max_velocity: [0.5, 0.5, 0.2, 1.0, 0.2],
            step: 0.02,
            settle_time: 2.0,
        }
    }
}

impl ExecutorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.kp >= 0.0) || !(self.step > 0.0) || !(self.settle_time >= 0.0) {
            return Err("executor needs kp >= 0, step > 0 and settle_time >= 0".into());
        }
        if self.max_velocity.iter().any(|v| !(*v > 0.0)) {
            return Err("executor velocity caps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub t: f64,
    pub point: usize,
    pub obstacle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Execution {
    /// `(time, state)` at every control step, starting with the initial state.
    pub path: Vec<(f64, Configuration)>,
    pub contacts: Vec<Contact>,
}

impl Execution {
    pub fn final_state(&self) -> Configuration {
        self.path.last().expect("path holds the initial state").1
    }

    pub fn collision_free(&self) -> bool {
        self.contacts.is_empty()
    }
}

/// Tracks `traj` from `state` until time `until` (clamped to the trajectory
/// end plus the settle time when `settle` is set).
///
/// Each step commands `v = kp (ref(t) - state)`, saturates every dimension at
/// its cap and integrates. Every state is checked against the world.
pub fn execute(
    traj: &Trajectory,
    state: Configuration,
    until: f64,
    settle: bool,
    world: &World,
    model: &RobotModel,
    points: &[CollisionPoint],
    params: &ExecutorParams,
) -> Execution {
    let end = if settle {
        traj.duration() + params.settle_time
    } else {
        until.min(traj.duration())
    };
    let steps = (end / params.step).round().max(0.0) as usize;
    let mut cur = state;
    let mut path = Vec::with_capacity(steps + 1);
    let mut contacts = Vec::new();
    path.push((0.0, cur));
    let log = |t: f64, cfg: &Configuration, contacts: &mut Vec<Contact>| {
        for (point, obstacle) in world.contacts(cfg, model, points) {
            contacts.push(Contact { t, point, obstacle });
        }
    };
    log(0.0, &cur, &mut contacts);
    for k in 1..=steps {
        let t = k as f64 * params.step;
        let target = traj.sample_at(t);
        let mut err = [
            target.x - cur.x,
            target.y - cur.y,
            target.z - cur.z,
            normalize_angle(target.phi - cur.phi),
            target.s - cur.s,
        ];
        for (d, e) in err.iter_mut().enumerate() {
            let cap = params.max_velocity[d];
            *e = (params.kp * *e).clamp(-cap, cap) * params.step;
        }
        cur = Configuration::new(
            cur.x + err[0],
            cur.y + err[1],
            (cur.z + err[2]).clamp(model.z_min, model.z_max),
            normalize_angle(cur.phi + err[3]),
            (cur.s + err[4]).clamp(model.s_min, model.s_max),
        );
        log(t, &cur, &mut contacts);
        path.push((t, cur));
    }
    Execution { path, contacts }
}
