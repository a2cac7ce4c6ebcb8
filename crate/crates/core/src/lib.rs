//! Posture-adaptive navigation for legged robots in confined spaces.
//!
//! The robot is abstracted as a box whose width shrinks as the body rises.
//! Depth points are fused into a two-layer elevation map, the map is turned
//! into a signed distance field, and a covariant gradient optimizer plans a
//! trajectory over position, yaw, body height and span.

pub mod field;
pub mod geometry;
pub mod mapping;
pub mod planner;
pub mod sim;

pub use field::{build_sdf, extrude_occupancy, obstacle_cost, obstacle_cost_gradient, OccupancyGrid, SdfGrid, SdfParams};
pub use geometry::{
    collision_point_jacobian, collision_point_world, generate_collision_points, CollisionPoint, Configuration,
    PinMask, RobotModel, Trajectory,
};
pub use mapping::{classify, fuse, Classification, DepthMeasurement, ElevationEstimate, MapSnapshot, MultiElevationMap};
pub use planner::{plan, posture_percentage, PlanResult, PlannerParams};
