//! Axis-aligned box worlds and the task generators.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{collision_point_world, CollisionPoint, Configuration, RobotModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("parameter {param} outside the range {lo}..{hi} of task {task}")]
    ParamOutOfRange { task: TaskKind, param: f64, lo: f64, hi: f64 },
    #[error("degenerate box {0:?}")]
    DegenerateBox(Aabb),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, WorldError> {
        let b = Self { min, max };
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(WorldError::DegenerateBox(b));
        }
        Ok(b)
    }

    /// Strict containment: points on the surface are outside.
    pub fn contains_strict(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Entry distance of a ray, if it hits the box in front of the origin.
    pub fn ray_entry(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let a = (self.min[i] - origin[i]) * inv;
            let b = (self.max[i] - origin[i]) * inv;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t1 < t0 || t1 < 0.0 {
            return None;
        }
        Some(t0.max(0.0))
    }
}

/// Boxes standing on an infinite ground plane at z = 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct World {
    pub boxes: Vec<Aabb>,
}

impl World {
    /// Distance to the first surface along a unit ray, ground included.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best = if dir.z < 0.0 && origin.z >= 0.0 {
            Some(-origin.z / dir.z)
        } else {
            None
        };
        for b in &self.boxes {
            if let Some(t) = b.ray_entry(origin, dir) {
                if best.map_or(true, |bt| t < bt) {
                    best = Some(t);
                }
            }
        }
        best
    }

    /// Whether a point lies inside any obstacle. The ground does not count.
    pub fn point_in_obstacle(&self, p: &Vector3<f64>) -> Option<usize> {
        self.boxes.iter().position(|b| b.contains_strict(p))
    }

    /// Collision points of a configuration that penetrate an obstacle, as
    /// `(point index, box index)` pairs.
    pub fn contacts(&self, cfg: &Configuration, model: &RobotModel, points: &[CollisionPoint]) -> Vec<(usize, usize)> {
        let cfg = cfg.with_span_offset(model.span_offset);
        points
            .iter()
            .enumerate()
            .filter_map(|(j, pt)| {
                self.point_in_obstacle(&collision_point_world(&cfg, pt, model))
                    .map(|b| (j, b))
            })
            .collect()
    }

    /// Height of the highest obstacle top strictly below `z` over column
    /// `(x, y)`, or 0 for bare ground.
    pub fn floor_below(&self, x: f64, y: f64, z: f64) -> f64 {
        self.boxes
            .iter()
            .filter(|b| x >= b.min[0] && x <= b.max[0] && y >= b.min[1] && y <= b.max[1] && b.max[2] <= z)
            .map(|b| b.max[2])
            .fold(0.0, f64::max)
    }

    /// Lowest obstacle underside strictly above `z` over column `(x, y)`.
    pub fn ceiling_above(&self, x: f64, y: f64, z: f64) -> Option<f64> {
        self.boxes
            .iter()
            .filter(|b| x >= b.min[0] && x <= b.max[0] && y >= b.min[1] && y <= b.max[1] && b.min[2] >= z)
            .map(|b| b.min[2])
            .reduce(f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ThinGap,
    LowOverhang,
    HighClearance,
    ClearanceBlock,
    Course,
    Corridor,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::ThinGap,
        TaskKind::LowOverhang,
        TaskKind::HighClearance,
        TaskKind::ClearanceBlock,
        TaskKind::Course,
        TaskKind::Corridor,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::ThinGap => "thin-gap",
            TaskKind::LowOverhang => "low-overhang",
            TaskKind::HighClearance => "high-clearance",
            TaskKind::ClearanceBlock => "clearance-block",
            TaskKind::Course => "course",
            TaskKind::Corridor => "corridor",
        }
    }

    /// Accepted parameter range (inclusive).
    pub fn param_range(&self) -> (f64, f64) {
        match self {
            TaskKind::ThinGap | TaskKind::Corridor => (0.2, 1.6),
            TaskKind::LowOverhang | TaskKind::Course => (0.1, 1.0),
            TaskKind::HighClearance => (0.0, 0.5),
            TaskKind::ClearanceBlock => (0.0, 0.8),
        }
    }

    /// Height of the floor/ceiling reference above the box bottom, as a
    /// fraction of the box height. Overhangs must read as ceiling even when
    /// they are lower than the box top, obstacles to step over must read as
    /// floor even when they are higher than the box bottom.
    pub fn body_reference(&self) -> f64 {
        match self {
            TaskKind::LowOverhang | TaskKind::Course => 0.0,
            TaskKind::ThinGap | TaskKind::Corridor | TaskKind::HighClearance | TaskKind::ClearanceBlock => 1.0,
        }
    }

    /// Posture change demanded by the obstacle itself, in percent of the
    /// feasible range of the dimension it constrains.
    pub fn constraint_adaptation(&self, param: f64, model: &RobotModel) -> Option<f64> {
        use crate::planner::posture_percentage;
        match self {
            TaskKind::ThinGap | TaskKind::Corridor => {
                Some(posture_percentage(param / 2.0, model.s_nom, model.s_min))
            }
            TaskKind::LowOverhang | TaskKind::Course => Some(posture_percentage(
                param,
                model.nominal_height(),
                model.z_min + model.h0,
            )),
            TaskKind::HighClearance => Some(posture_percentage(param, model.z_nom, model.z_max)),
            TaskKind::ClearanceBlock => None,
        }
    }

    /// Whether a larger parameter means a looser constraint.
    pub fn larger_is_looser(&self) -> bool {
        !matches!(self, TaskKind::HighClearance)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| WorldError::UnknownTask(s.to_string()))
    }
}

/// Planar goal pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self { x, y, phi }
    }
}

/// A world together with the waypoints a trial has to reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task: TaskKind,
    pub param: f64,
    pub world: World,
    pub waypoints: Vec<Waypoint>,
}

const WALL_TOP: f64 = 1.0;

fn boxed(min: [f64; 3], max: [f64; 3]) -> Aabb {
    Aabb::new(min, max).expect("generator boxes have positive extent")
}

fn gap_walls(x0: f64, x1: f64, gap: f64, depth: f64) -> [Aabb; 2] {
    let h = gap / 2.0;
    [
        boxed([x0, h, 0.0], [x1, h + depth, WALL_TOP]),
        boxed([x0, -h - depth, 0.0], [x1, -h, WALL_TOP]),
    ]
}

/// Builds the world of a task. The robot starts at the origin facing +x.
pub fn make_world(task: TaskKind, param: f64) -> Result<Scenario, WorldError> {
    let (lo, hi) = task.param_range();
    if !(param >= lo && param <= hi) {
        return Err(WorldError::ParamOutOfRange { task, param, lo, hi });
    }
    let mut boxes = Vec::new();
    let waypoints;
    match task {
        TaskKind::ThinGap => {
            boxes.extend(gap_walls(1.5, 1.8, param, 2.5));
            waypoints = vec![Waypoint::new(4.0, 0.0, 0.0)];
        }
        TaskKind::LowOverhang => {
            boxes.push(boxed([1.5, -2.0, param], [2.5, 2.0, WALL_TOP]));
            waypoints = vec![Waypoint::new(4.0, 0.0, 0.0)];
        }
        TaskKind::HighClearance => {
            if param > 0.0 {
                boxes.push(boxed([1.6, -0.2, 0.0], [1.9, 0.2, param]));
            }
            waypoints = vec![Waypoint::new(4.0, 0.0, 0.0)];
        }
        TaskKind::ClearanceBlock => {
            boxes.push(boxed([1.4, -2.0, param], [1.7, 2.0, param + 0.15]));
            waypoints = vec![Waypoint::new(3.0, 0.0, 0.0)];
        }
        TaskKind::Course => {
            boxes.extend(gap_walls(1.5, 1.8, 0.8, 2.5));
            boxes.push(boxed([3.4, -0.2, 0.0], [3.7, 0.2, 0.12]));
            boxes.push(boxed([5.5, -2.0, param], [6.5, 2.0, WALL_TOP]));
            waypoints = vec![
                Waypoint::new(2.5, 0.0, 0.0),
                Waypoint::new(4.5, 0.0, 0.0),
                Waypoint::new(7.5, 0.0, 0.0),
            ];
        }
        TaskKind::Corridor => {
            boxes.extend(gap_walls(1.2, 2.2, param + 0.3, 2.0));
            boxes.extend(gap_walls(2.2, 3.2, param + 0.15, 2.0));
            boxes.extend(gap_walls(3.2, 4.5, param, 2.0));
            waypoints = vec![Waypoint::new(5.5, 0.0, 0.0)];
        }
    }
    Ok(Scenario {
        task,
        param,
        world: World { boxes },
        waypoints,
    })
}
