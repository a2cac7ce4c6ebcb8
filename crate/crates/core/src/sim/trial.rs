//! Closed sense, map, plan, execute loop and confinement sweeps.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{build_sdf, extrude_occupancy, OccupancyGrid, SdfGrid, SdfParams};
use crate::geometry::{generate_collision_points, normalize_angle, Configuration, RobotModel};
use crate::mapping::{MappingParams, MultiElevationMap};
use crate::planner::{plan, Adaptation, PlannerParams};
use crate::sim::executor::{execute, ExecutorParams};
use crate::sim::sensor::SensorModel;
use crate::sim::world::{make_world, Scenario, TaskKind, Waypoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopParams {
    /// Path length executed before replanning (m).
    pub horizon: f64,
    /// Farthest planar distance planned toward a waypoint (m).
    pub plan_range: f64,
    pub max_cycles: usize,
    /// Planar distance at which a waypoint counts as reached (m).
    pub goal_tolerance: f64,
    /// Lowest height used as the floor/ceiling reference (m). The highest is
    /// the reference of the nominal posture.
    pub min_reference: f64,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            plan_range: 2.0,
            max_cycles: 30,
            goal_tolerance: 0.05,
            min_reference: 0.1,
        }
    }
}

/// Everything a trial needs besides the task itself.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialSettings {
    pub robot: RobotModel,
    pub mapping: MappingParams,
    pub sdf: SdfParams,
    pub planner: PlannerParams,
    pub sensor: SensorModel,
    pub executor: ExecutorParams,
    #[serde(rename = "loop")]
    pub cycle: LoopParams,
    /// Floor/ceiling reference above the box bottom as a fraction of the box
    /// height; the task default when absent.
    pub body_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub task: TaskKind,
    pub param: f64,
    pub seed: u64,
    /// Overrides the task's own waypoints when present.
    pub waypoints: Option<Vec<Waypoint>>,
    pub settings: TrialSettings,
}

impl TrialSpec {
    pub fn new(task: TaskKind, param: f64, seed: u64) -> Self {
        Self {
            task,
            param,
            seed,
            waypoints: None,
            settings: TrialSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub plan_time: f64,
    pub sdf_time: f64,
    pub iterations: usize,
    pub converged: bool,
    pub min_clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub task: TaskKind,
    pub param: f64,
    pub seed: u64,
    pub success: bool,
    pub reason: Option<String>,
    /// Posture change the obstacle demands, in percent.
    pub constraint_adaptation: Option<f64>,
    /// Posture extremes actually executed.
    pub achieved: Adaptation,
    pub cycles: usize,
    pub plans: Vec<PlanStats>,
    pub collisions: usize,
    /// Executed `(time, state)` samples over the whole trial.
    pub path: Vec<(f64, Configuration)>,
}

impl TrialReport {
    pub fn max_plan_time(&self) -> f64 {
        self.plans.iter().map(|p| p.plan_time).fold(0.0, f64::max)
    }

    pub fn mean_plan_time(&self) -> f64 {
        mean(self.plans.iter().map(|p| p.plan_time))
    }

    pub fn mean_sdf_time(&self) -> f64 {
        mean(self.plans.iter().map(|p| p.sdf_time))
    }

    /// Achieved adaptation of the dimension the task constrains.
    pub fn relevant_adaptation(&self) -> f64 {
        match self.task {
            TaskKind::ThinGap | TaskKind::Corridor => self.achieved.span,
            TaskKind::LowOverhang | TaskKind::Course => self.achieved.height,
            TaskKind::HighClearance => self.achieved.clearance,
            TaskKind::ClearanceBlock => self.achieved.max(),
        }
    }

    /// Rows `t,x,y,z,phi,s` of the executed path.
    pub fn path_csv(&self) -> String {
        let mut out = String::from("t,x,y,z,phi,s\n");
        for (t, c) in &self.path {
            out.push_str(&format!("{t},{},{},{},{},{}\n", c.x, c.y, c.z, c.phi, c.s));
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Validates every parameter block of the settings.
pub fn validate_settings(s: &TrialSettings) -> Result<(), String> {
    s.robot.validate().map_err(|e| e.to_string())?;
    s.mapping.validate().map_err(|e| e.to_string())?;
    s.sdf.validate().map_err(|e| e.to_string())?;
    s.planner.validate().map_err(|e| e.to_string())?;
    s.sensor.validate()?;
    s.executor.validate()?;
    let c = &s.cycle;
    if !(c.horizon > 0.0) || !(c.plan_range > 0.0) || !(c.goal_tolerance > 0.0) || c.max_cycles == 0 {
        return Err("loop parameters must be positive".into());
    }
    if !c.min_reference.is_finite() {
        return Err("min_reference must be finite".into());
    }
    if let Some(r) = s.body_reference {
        if !(0.0..=1.0).contains(&r) {
            return Err("body_reference must lie in [0, 1]".into());
        }
    }
    let reach = c.plan_range + s.robot.l0 / 2.0 + s.robot.s_max + s.robot.span_offset;
    if reach >= s.mapping.side_length / 2.0 {
        return Err("plan_range does not fit inside the map".into());
    }
    Ok(())
}

/// Intermediate goal at most `range` from `from` toward `wp`.
fn planning_goal(from: &Configuration, wp: &Waypoint, range: f64) -> (Configuration, bool) {
    let dx = wp.x - from.x;
    let dy = wp.y - from.y;
    let dist = dx.hypot(dy);
    if dist <= range {
        (Configuration::new(wp.x, wp.y, from.z, normalize_angle(wp.phi), from.s), true)
    } else {
        let k = range / dist;
        (
            Configuration::new(from.x + dx * k, from.y + dy * k, from.z, normalize_angle(wp.phi), from.s),
            false,
        )
    }
}

fn layer_reference(s: &TrialSettings, state: &Configuration, reference: f64) -> f64 {
    (state.z.min(s.robot.z_nom) + reference).max(s.cycle.min_reference)
}

/// World state after the first sensing step of a trial: the map, its
/// extruded occupancy and distance field, and the first planning problem.
#[derive(Debug, Clone)]
pub struct FirstCycle {
    pub map: MultiElevationMap,
    pub occupancy: OccupancyGrid,
    pub sdf: SdfGrid,
    pub start: Configuration,
    pub goal: Configuration,
}

/// Runs the first sense and map step of a trial without planning.
pub fn first_cycle(spec: &TrialSpec) -> Result<FirstCycle, String> {
    let s = &spec.settings;
    validate_settings(s)?;
    let scenario = make_world(spec.task, spec.param).map_err(|e| e.to_string())?;
    let waypoints = spec.waypoints.clone().unwrap_or(scenario.waypoints);
    let wp = waypoints.first().ok_or("no waypoints")?;
    let reference = s.body_reference.unwrap_or_else(|| spec.task.body_reference()) * s.robot.h0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let start = Configuration::nominal(&s.robot, 0.0, 0.0, 0.0);
    let mut map = MultiElevationMap::new(s.mapping, (start.x, start.y)).map_err(|e| e.to_string())?;
    let scan = s.sensor.render_depth(&scenario.world, &start, &mut rng);
    map.ingest_scan(&scan, layer_reference(s, &start, reference))
        .map_err(|e| e.to_string())?;
    let occupancy = extrude_occupancy(&map.snapshot(), &s.sdf).map_err(|e| e.to_string())?;
    let sdf = build_sdf(&occupancy, s.sdf.max_distance);
    let (goal, _) = planning_goal(&start, wp, s.cycle.plan_range);
    Ok(FirstCycle {
        map,
        occupancy,
        sdf,
        start,
        goal,
    })
}

/// Runs one closed-loop trial. Deterministic for a given spec.
pub fn run_trial(spec: &TrialSpec) -> TrialReport {
    let s = &spec.settings;
    let mut report = TrialReport {
        task: spec.task,
        param: spec.param,
        seed: spec.seed,
        success: false,
        reason: None,
        constraint_adaptation: spec.task.constraint_adaptation(spec.param, &s.robot),
        achieved: Adaptation::default(),
        cycles: 0,
        plans: Vec::new(),
        collisions: 0,
        path: Vec::new(),
    };
    let fail = |mut r: TrialReport, why: String| {
        r.reason = Some(why);
        r.achieved = Adaptation::of_path(&r.path.iter().map(|p| p.1).collect::<Vec<_>>(), &s.robot);
        r
    };
    if let Err(e) = validate_settings(s) {
        return fail(report, format!("invalid settings: {e}"));
    }
    let scenario: Scenario = match make_world(spec.task, spec.param) {
        Ok(sc) => sc,
        Err(e) => return fail(report, e.to_string()),
    };
    let waypoints = spec.waypoints.clone().unwrap_or(scenario.waypoints);
    let points = match generate_collision_points(&s.robot) {
        Ok(p) => p,
        Err(e) => return fail(report, e.to_string()),
    };
    let reference = s.body_reference.unwrap_or_else(|| spec.task.body_reference()) * s.robot.h0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut state = Configuration::nominal(&s.robot, 0.0, 0.0, 0.0);
    let mut map = match MultiElevationMap::new(s.mapping, (state.x, state.y)) {
        Ok(m) => m,
        Err(e) => return fail(report, e.to_string()),
    };
    let mut last_xy = (state.x, state.y);
    let mut clock = 0.0;
    report.path.push((clock, state));
    let mut target = 0;

    while target < waypoints.len() {
        let wp = &waypoints[target];
        if (wp.x - state.x).hypot(wp.y - state.y) < s.cycle.goal_tolerance {
            target += 1;
            continue;
        }
        if report.cycles >= s.cycle.max_cycles {
            return fail(report, "cycle limit reached".into());
        }
        report.cycles += 1;

        let scan = s.sensor.render_depth(&scenario.world, &state, &mut rng);
        map.recenter((state.x, state.y));
        map.propagate_motion((state.x - last_xy.0).hypot(state.y - last_xy.1));
        last_xy = (state.x, state.y);
        if let Err(e) = map.ingest_scan(&scan, layer_reference(s, &state, reference)) {
            return fail(report, e.to_string());
        }

        let sdf_timer = Instant::now();
        let sdf = match extrude_occupancy(&map.snapshot(), &s.sdf) {
            Ok(occ) => build_sdf(&occ, s.sdf.max_distance),
            Err(e) => return fail(report, e.to_string()),
        };
        let sdf_time = sdf_timer.elapsed().as_secs_f64();

        let (goal, final_leg) = planning_goal(&state, wp, s.cycle.plan_range);
        let result = match plan(&state, &goal, &sdf, &s.robot, &s.planner) {
            Ok(r) => r,
            Err(e) => return fail(report, format!("planner failed: {e}")),
        };
        report.plans.push(PlanStats {
            plan_time: result.plan_time,
            sdf_time,
            iterations: result.iterations,
            converged: result.converged,
            min_clearance: result.min_clearance,
        });
        let traj = &result.trajectory;
        let arc = traj.arc_lengths();
        let total = *arc.last().unwrap_or(&0.0);
        let settle = final_leg && total <= s.cycle.horizon * 1.5;
        let last = if settle {
            traj.len() - 1
        } else {
            arc.iter().position(|&a| a >= s.cycle.horizon).unwrap_or(arc.len() - 1)
        };
        let until = last as f64 * traj.dt;
        let (worst, committed) = result.clearance[..=last]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |a, (i, c)| if c < a.1 { (i, c) } else { a });
        if committed < 0.0 {
            return fail(
                report,
                format!("planner failed: min clearance {committed:.3} m at waypoint {worst}"),
            );
        }
        let ex = execute(traj, state, until, settle, &scenario.world, &s.robot, &points, &s.executor);
        for &(t, c) in ex.path.iter().skip(1) {
            report.path.push((clock + t, c));
        }
        clock += ex.path.last().map_or(0.0, |p| p.0);
        state = ex.final_state();
        if !ex.collision_free() {
            report.collisions = ex.contacts.len();
            let first = ex.contacts[0];
            return fail(
                report,
                format!(
                    "collision: point {} entered obstacle {} at t = {:.2} s",
                    first.point,
                    first.obstacle,
                    clock - ex.path.last().map_or(0.0, |p| p.0) + first.t
                ),
            );
        }
        if settle && (wp.x - state.x).hypot(wp.y - state.y) >= s.cycle.goal_tolerance {
            // settled short of the waypoint, plan again from here
            continue;
        }
    }
    report.success = true;
    report.achieved = Adaptation::of_path(&report.path.iter().map(|p| p.1).collect::<Vec<_>>(), &s.robot);
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_adaptation: f64,
    pub mean_plan_time: f64,
    pub max_plan_time: f64,
    pub mean_sdf_time: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "param,trials,successes,success_rate,mean_adaptation,mean_plan_time,max_plan_time,mean_sdf_time";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.param,
            self.trials,
            self.successes,
            self.success_rate,
            self.mean_adaptation,
            self.mean_plan_time,
            self.max_plan_time,
            self.mean_sdf_time
        )
    }
}

/// Parameter levels from `start` toward `end` in steps of `|step|`, both
/// ends included when they fall on the lattice.
pub fn sweep_levels(start: f64, end: f64, step: f64) -> Vec<f64> {
    if step == 0.0 || !step.is_finite() || start == end {
        return Vec::new();
    }
    let step = step.abs() * (end - start).signum();
    let count = ((end - start) / step + 1e-9).floor() as usize;
    (0..=count).map(|k| start + step * k as f64).collect()
}

/// Runs every `(level, seed)` pair of a sweep and aggregates per level.
pub fn run_sweep(base: &TrialSpec, levels: &[f64], seeds: &[u64]) -> (Vec<SweepRow>, Vec<TrialReport>) {
    let jobs: Vec<(f64, u64)> = levels
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let reports: Vec<TrialReport> = jobs
        .par_iter()
        .map(|&(param, seed)| {
            run_trial(&TrialSpec {
                param,
                seed,
                ..base.clone()
            })
        })
        .collect();
    let rows = levels
        .iter()
        .enumerate()
        .map(|(k, &param)| {
            let chunk = &reports[k * seeds.len()..(k + 1) * seeds.len()];
            let successes = chunk.iter().filter(|r| r.success).count();
            let all_plans = chunk.iter().flat_map(|r| r.plans.iter());
            SweepRow {
                param,
                trials: chunk.len(),
                successes,
                success_rate: if chunk.is_empty() {
                    0.0
                } else {
                    successes as f64 / chunk.len() as f64
                },
                mean_adaptation: mean(chunk.iter().map(TrialReport::relevant_adaptation)),
                mean_plan_time: mean(all_plans.clone().map(|p| p.plan_time)),
                max_plan_time: all_plans.clone().map(|p| p.plan_time).fold(0.0, f64::max),
                mean_sdf_time: mean(all_plans.map(|p| p.sdf_time)),
            }
        })
        .collect();
    (rows, reports)
}
