use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use confined_nav::field::SdfParams;
use confined_nav::mapping::MappingParams;
use confined_nav::sim::{
    make_world, sweep_levels, validate_settings, ExecutorParams, LoopParams, SensorModel, TaskKind, TrialSettings,
    TrialSpec, Waypoint,
};
use confined_nav::{PlannerParams, RobotModel};
use serde::{Deserialize, Serialize};

/// Range of task parameters visited by a sweep, in visiting order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

impl SweepRange {
    /// Loose to tight range around the task's confinement threshold.
    pub fn default_for(task: TaskKind) -> Self {
        let (from, to, step) = match task {
            TaskKind::ThinGap => (0.9, 0.6, 0.05),
            TaskKind::Corridor => (1.0, 0.6, 0.05),
            TaskKind::LowOverhang | TaskKind::Course => (0.32, 0.15, 0.025),
            TaskKind::HighClearance => (0.18, 0.34, 0.02),
            TaskKind::ClearanceBlock => (0.0, 0.5, 0.05),
        };
        Self { from, to, step }
    }

    pub fn levels(&self) -> Vec<f64> {
        sweep_levels(self.from, self.to, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub param: f64,
    pub seed: u64,
    /// Seeds per sweep level.
    pub trials: usize,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body_reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<Vec<Waypoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepRange>,
    pub robot: RobotModel,
    pub mapping: MappingParams,
    pub sdf: SdfParams,
    pub planner: PlannerParams,
    pub sensor: SensorModel,
    pub executor: ExecutorParams,
    #[serde(rename = "loop")]
    pub cycle: LoopParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = TrialSettings::default();
        Self {
            task: TaskKind::ThinGap,
            param: 0.75,
            seed: 0,
            trials: 10,
            out: PathBuf::from("out"),
            body_reference: s.body_reference,
            waypoints: None,
            sweep: None,
            robot: s.robot,
            mapping: s.mapping,
            sdf: s.sdf,
            planner: s.planner,
            sensor: s.sensor,
            executor: s.executor,
            cycle: s.cycle,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn settings(&self) -> TrialSettings {
        TrialSettings {
            robot: self.robot,
            mapping: self.mapping,
            sdf: self.sdf,
            planner: self.planner,
            sensor: self.sensor,
            executor: self.executor,
            cycle: self.cycle,
            body_reference: self.body_reference,
        }
    }

    pub fn spec(&self) -> TrialSpec {
        TrialSpec {
            task: self.task,
            param: self.param,
            seed: self.seed,
            waypoints: self.waypoints.clone(),
            settings: self.settings(),
        }
    }

    pub fn sweep_range(&self) -> SweepRange {
        self.sweep.unwrap_or_else(|| SweepRange::default_for(self.task))
    }

    /// Checks every parameter block and the task parameters.
    pub fn validate(&self) -> Result<()> {
        validate_settings(&self.settings()).map_err(anyhow::Error::msg)?;
        make_world(self.task, self.param)?;
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        if let Some(wps) = &self.waypoints {
            if wps.is_empty() {
                bail!("waypoints must not be empty");
            }
            if wps.iter().any(|w| !(w.x.is_finite() && w.y.is_finite() && w.phi.is_finite())) {
                bail!("waypoints must be finite");
            }
        }
        if let Some(r) = self.sweep {
            if !(r.from.is_finite() && r.to.is_finite() && r.step.is_finite() && r.step >= 0.0) {
                bail!("sweep range must be finite with a non-negative step");
            }
            if r.step == 0.0 && r.from != r.to {
                bail!("sweep step must be positive");
            }
        }
        for level in self.sweep_range().levels() {
            make_world(self.task, level)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse("task = \"low-overhang\"\nparam = 0.25\n[planner]\neta = 50.0\n").unwrap();
        assert_eq!(c.planner.eta, 50.0);
        assert_eq!(c.planner.max_iters, PlannerParams::default().max_iters);
        assert_eq!(c.task, TaskKind::LowOverhang);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("tsak = \"thin-gap\"\n").is_err());
        assert!(RunConfig::parse("[planner]\netaa = 1.0\n").is_err());
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("task = \"thin-gap\"\nparam = \"wide\"\n").unwrap_err();
        assert!(format!("{e:#}").contains("line 2"), "{e:#}");
    }

    #[test]
    fn round_trip_preserves_config() {
        let mut c = RunConfig {
            task: TaskKind::HighClearance,
            param: 0.26,
            seed: 7,
            body_reference: Some(0.5),
            waypoints: Some(vec![Waypoint::new(3.0, 0.5, 0.1)]),
            sweep: Some(SweepRange::default_for(TaskKind::HighClearance)),
            ..RunConfig::default()
        };
        c.planner.eta = 123.456;
        c.sensor = c.sensor.noiseless();
        for c in [RunConfig::default(), c] {
            let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
            back.validate().unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn out_of_range_param_is_invalid() {
        let c = RunConfig {
            param: 5.0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
