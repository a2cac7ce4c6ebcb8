mod config;

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use confined_nav::planner::Adaptation;
use confined_nav::sim::{first_cycle, run_sweep, run_trial, TaskKind, TrialReport, SWEEP_CSV_HEADER};
use confined_nav::{build_sdf, plan, Configuration};
use serde::Serialize;

use crate::config::{RunConfig, SweepRange};

#[derive(Parser)]
#[command(name = "confined-nav", version, about = "Posture planning for legged robots in confined spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop trial.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also dump the map and an SDF slice after the first scan.
        #[arg(long)]
        dumps: bool,
    },
    /// Success rate and timing over a range of task parameters.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        from: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        to: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Time the SDF build and the first plan of a trial.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Write the elevation map after the first scan.
    DumpMap {
        #[command(flatten)]
        common: Common,
    },
    /// Write a horizontal SDF slice after the first scan.
    DumpSdf {
        #[command(flatten)]
        common: Common,
        /// Slice height (m); mid-body at the nominal posture by default.
        #[arg(long)]
        z: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    param: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds per sweep level, or repetitions for bench.
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.task {
            if c.task != t {
                c.sweep = None;
            }
            c.task = t;
        }
        if let Some(p) = self.param {
            c.param = p;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out.clone_from(o);
        }
        if let Some(n) = self.trials {
            c.trials = n;
        }
        Ok(c)
    }
}

enum Failure {
    Config(anyhow::Error),
    Trial,
    Io(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Io(e)
    }
}

/// Parses and validates before anything is written.
fn load(common: &Common, adjust: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Failure> {
    let mut c = common.resolve().map_err(Failure::Config)?;
    adjust(&mut c);
    c.validate().map_err(Failure::Config)?;
    Ok(c)
}

fn prepare_out(c: &RunConfig) -> Result<()> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    write(&c.out.join("config.toml"), &c.to_toml()?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn hash_text(text: &str) -> String {
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    format!("{:016x}", h.finish())
}

#[derive(Serialize)]
struct Timing {
    plans: usize,
    max_plan_time: f64,
    mean_plan_time: f64,
    mean_sdf_time: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    task: TaskKind,
    param: f64,
    seed: u64,
    success: bool,
    reason: Option<&'a str>,
    constraint_adaptation: Option<f64>,
    achieved: Adaptation,
    relevant_adaptation: f64,
    cycles: usize,
    collisions: usize,
    final_state: Option<Configuration>,
    trajectory_hash: String,
    timing: Timing,
}

fn summary<'a>(r: &'a TrialReport, csv: &str) -> Summary<'a> {
    Summary {
        task: r.task,
        param: r.param,
        seed: r.seed,
        success: r.success,
        reason: r.reason.as_deref(),
        constraint_adaptation: r.constraint_adaptation,
        achieved: r.achieved,
        relevant_adaptation: r.relevant_adaptation(),
        cycles: r.cycles,
        collisions: r.collisions,
        final_state: r.path.last().map(|p| p.1),
        trajectory_hash: hash_text(csv),
        timing: Timing {
            plans: r.plans.len(),
            max_plan_time: r.max_plan_time(),
            mean_plan_time: r.mean_plan_time(),
            mean_sdf_time: r.mean_sdf_time(),
        },
    }
}

fn cmd_run(common: &Common, dumps: bool) -> Result<(), Failure> {
    let c = load(common, |_| {})?;
    let report = run_trial(&c.spec());
    prepare_out(&c)?;
    let csv = report.path_csv();
    write(&c.out.join("trajectory.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&summary(&report, &csv)).map_err(anyhow::Error::from)?;
    write(&c.out.join("summary.json"), &json)?;
    if dumps {
        write_dumps(&c, true, true, None)?;
    }
    match &report.reason {
        None => println!(
            "{} {}: success, adaptation {:.1}% (constraint {}), {} cycles",
            c.task,
            c.param,
            report.relevant_adaptation(),
            report.constraint_adaptation.map_or("n/a".into(), |a| format!("{a:.1}%")),
            report.cycles
        ),
        Some(why) => println!("{} {}: failed, {why}", c.task, c.param),
    }
    if report.success {
        Ok(())
    } else {
        Err(Failure::Trial)
    }
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn cmd_sweep(common: &Common, from: Option<f64>, to: Option<f64>, step: Option<f64>) -> Result<(), Failure> {
    let c = load(common, |c| {
        if from.is_some() || to.is_some() || step.is_some() {
            let base = c.sweep_range();
            c.sweep = Some(SweepRange {
                from: from.unwrap_or(base.from),
                to: to.unwrap_or(base.to),
                step: step.unwrap_or(base.step),
            });
        }
    })?;
    let levels = c.sweep_range().levels();
    let seeds: Vec<u64> = (c.seed..c.seed + c.trials as u64).collect();
    let (rows, reports) = run_sweep(&c.spec(), &levels, &seeds);
    prepare_out(&c)?;
    let mut table = format!("{SWEEP_CSV_HEADER}\n");
    println!("{SWEEP_CSV_HEADER}");
    for row in &rows {
        let line = row.csv_line();
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    write(&c.out.join("sweep.csv"), &table)?;
    let mut trials =
        String::from("param,seed,success,constraint_adaptation,relevant_adaptation,cycles,max_plan_time,reason\n");
    for r in &reports {
        trials.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.param,
            r.seed,
            r.success,
            r.constraint_adaptation.map_or(String::new(), |a| a.to_string()),
            r.relevant_adaptation(),
            r.cycles,
            r.max_plan_time(),
            csv_field(r.reason.as_deref().unwrap_or(""))
        ));
    }
    write(&c.out.join("trials.csv"), &trials)?;
    Ok(())
}

#[derive(Serialize)]
struct Stat {
    best: f64,
    mean: f64,
}

impl Stat {
    fn of(times: &[f64]) -> Self {
        Self {
            best: times.iter().copied().fold(f64::INFINITY, f64::min),
            mean: times.iter().sum::<f64>() / times.len() as f64,
        }
    }
}

#[derive(Serialize)]
struct Machine {
    os: &'static str,
    arch: &'static str,
    threads: usize,
    cpu: Option<String>,
}

impl Machine {
    fn detect() -> Self {
        let cpu = fs::read_to_string("/proc/cpuinfo").ok().and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu,
        }
    }
}

#[derive(Serialize)]
struct Bench {
    task: TaskKind,
    param: f64,
    seed: u64,
    repeats: usize,
    sdf_dims: [usize; 3],
    sdf_build: Stat,
    plan: Stat,
    iterations: usize,
    collision_free: bool,
    trajectory_hash: String,
    deterministic: bool,
    machine: Machine,
}

fn cmd_bench(common: &Common) -> Result<(), Failure> {
    let repeats = common.trials.unwrap_or(5);
    let c = load(common, |c| c.trials = repeats)?;
    let fc = first_cycle(&c.spec()).map_err(|e| Failure::Io(anyhow::anyhow!(e)))?;
    let mut sdf_times = Vec::new();
    let mut plan_times = Vec::new();
    let mut hashes = Vec::new();
    let mut last = None;
    for _ in 0..repeats {
        let t = Instant::now();
        let sdf = build_sdf(&fc.occupancy, c.sdf.max_distance);
        sdf_times.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let r = plan(&fc.start, &fc.goal, &sdf, &c.robot, &c.planner).map_err(anyhow::Error::from)?;
        plan_times.push(t.elapsed().as_secs_f64());
        hashes.push(hash_text(&r.to_csv()));
        last = Some(r);
    }
    let r = last.expect("at least one repeat");
    let bench = Bench {
        task: c.task,
        param: c.param,
        seed: c.seed,
        repeats,
        sdf_dims: fc.sdf.geometry.dims,
        sdf_build: Stat::of(&sdf_times),
        plan: Stat::of(&plan_times),
        iterations: r.iterations,
        collision_free: r.collision_free,
        deterministic: hashes.windows(2).all(|w| w[0] == w[1]),
        trajectory_hash: hashes[0].clone(),
        machine: Machine::detect(),
    };
    prepare_out(&c)?;
    let json = serde_json::to_string_pretty(&bench).map_err(anyhow::Error::from)?;
    write(&c.out.join("bench.json"), &json)?;
    let [nx, ny, nz] = bench.sdf_dims;
    println!(
        "sdf {nx}x{ny}x{nz}: best {:.4} s, mean {:.4} s\nplan: best {:.4} s, mean {:.4} s, {} iterations, hash {}",
        bench.sdf_build.best, bench.sdf_build.mean, bench.plan.best, bench.plan.mean, bench.iterations, bench.trajectory_hash
    );
    Ok(())
}

fn write_dumps(c: &RunConfig, map: bool, sdf: bool, z: Option<f64>) -> Result<(), Failure> {
    let fc = first_cycle(&c.spec()).map_err(|e| Failure::Io(anyhow::anyhow!(e)))?;
    if map {
        write(&c.out.join("map.dump"), &fc.map.snapshot().to_dump())?;
    }
    if sdf {
        let z = z.unwrap_or(c.robot.z_nom + c.robot.h0 / 2.0);
        let slice = fc.sdf.slice_z_csv(z).map_err(|e| Failure::Config(e.into()))?;
        write(&c.out.join("sdf_slice.csv"), &slice)?;
    }
    Ok(())
}

fn cmd_dump(common: &Common, map: bool, z: Option<f64>) -> Result<(), Failure> {
    let c = load(common, |_| {})?;
    prepare_out(&c)?;
    write_dumps(&c, map, !map, z)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, dumps } => cmd_run(common, *dumps),
        Command::Sweep {
            common,
            from,
            to,
            step,
        } => cmd_sweep(common, *from, *to, *step),
        Command::Bench { common } => cmd_bench(common),
        Command::DumpMap { common } => cmd_dump(common, true, None),
        Command::DumpSdf { common, z } => cmd_dump(common, false, *z),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Trial) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: invalid configuration: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
