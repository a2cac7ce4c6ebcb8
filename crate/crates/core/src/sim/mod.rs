//! Synthetic worlds, depth sensing, path following and closed-loop trials.

pub mod executor;
pub mod sensor;
pub mod trial;
pub mod world;

pub use executor::{execute, Contact, Execution, ExecutorParams};
pub use sensor::SensorModel;
pub use trial::{
    first_cycle, run_sweep, run_trial, sweep_levels, validate_settings, FirstCycle, LoopParams, PlanStats, SweepRow, TrialReport,
    TrialSettings, TrialSpec, SWEEP_CSV_HEADER,
};
pub use world::{make_world, Aabb, Scenario, TaskKind, Waypoint, World};
