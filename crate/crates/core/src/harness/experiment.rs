//! Experiment configuration and the seeded benchmark loop.
//!
//! Runs for all (method, samples, seed) combinations execute in parallel and
//! are collected in a fixed order, so the output does not depend on the
//! number of worker threads. A failing run is recorded with its error message
//! and the remaining runs continue.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::drive::{gen_data, io_error, run_mcl, run_slam, CourseConfig, DriveLog, FilterRun};
use super::output::{emit_plot_data, summarize, write_records, RunRecord, Series, SummaryRow, RUNS_FILE, SUMMARY_FILE};
use crate::control::{
    arm_closed_loop, double_slit_closed_loop, double_slit_hits_wall, double_slit_sample_pre_wall,
    double_slit_unguided_walks, himmelblau, newton_himmelblau, stochastic_optimize, ArmSpec, DoubleSlitSpec,
    StochOptSpec,
};
use crate::error::{Error, Result};
use crate::mcl::Proposal;
use crate::rng::{self, tag};
use crate::slam::SlamMethod;
use crate::vehicle::VehicleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DoubleSlit,
    Arm,
    Himmelblau,
    Mcl,
    Slam,
    GenData,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::DoubleSlit,
        Experiment::Arm,
        Experiment::Himmelblau,
        Experiment::Mcl,
        Experiment::Slam,
        Experiment::GenData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DoubleSlit => "double-slit",
            Experiment::Arm => "arm",
            Experiment::Himmelblau => "himmelblau",
            Experiment::Mcl => "mcl",
            Experiment::Slam => "slam",
            Experiment::GenData => "gen-data",
        }
    }

    /// Method names accepted by the experiment.
    pub fn methods(self) -> &'static [&'static str] {
        match self {
            Experiment::DoubleSlit | Experiment::Himmelblau => &["implicit"],
            Experiment::Arm => &["exact", "perturbed"],
            Experiment::Mcl => &["implicit", "standard"],
            Experiment::Slam => &["implicit", "fastslam", "ekf"],
            Experiment::GenData => &[],
        }
    }

    pub fn default_samples(self) -> Vec<usize> {
        match self {
            Experiment::DoubleSlit => vec![10, 50, 100, 500],
            Experiment::Arm | Experiment::GenData => vec![1],
            Experiment::Himmelblau => vec![50],
            Experiment::Mcl => vec![10, 20, 40, 80, 100, 150],
            Experiment::Slam => vec![10, 20, 50, 100, 200, 400, 500],
        }
    }

    pub fn default_seeds(self) -> Vec<u64> {
        let n = match self {
            Experiment::DoubleSlit => 100,
            Experiment::Arm | Experiment::Mcl => 20,
            Experiment::Himmelblau | Experiment::Slam => 50,
            Experiment::GenData => 1,
        };
        (0..n).collect()
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown experiment {s:?}")))
    }
}

/// Everything needed to reproduce an experiment. Read from JSON; missing
/// fields take their defaults, and missing method, sample or seed lists take
/// the experiment's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub methods: Option<Vec<String>>,
    pub samples: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub out: PathBuf,
    /// Record wall-clock time per step. Off by default, since timings make
    /// the output files differ between runs.
    pub timing: bool,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
    pub course: CourseConfig,
    /// Vehicle parameters assumed by the filters. Defaults to the nominal
    /// parameters for localization and to the course noise for SLAM.
    pub filter: Option<VehicleParams>,
    pub double_slit: DoubleSlitSpec,
    pub arm: ArmSpec,
    /// Mass of the first link assumed by the controller in the perturbed arm
    /// runs.
    pub perturbed_m1: f64,
    pub himmelblau: StochOptSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new(Experiment::Mcl)
    }
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            methods: None,
            samples: None,
            seeds: None,
            out: PathBuf::from("results"),
            timing: false,
            threads: None,
            course: CourseConfig::default(),
            filter: None,
            double_slit: DoubleSlitSpec::default(),
            arm: ArmSpec::default(),
            perturbed_m1: 1.4,
            himmelblau: StochOptSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolved_methods(&self) -> Vec<String> {
        match &self.methods {
            Some(m) => m.clone(),
            None => self.experiment.methods().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn resolved_samples(&self) -> Vec<usize> {
        self.samples.clone().unwrap_or_else(|| self.experiment.default_samples())
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| self.experiment.default_seeds())
    }

    pub fn filter_params(&self) -> VehicleParams {
        match (self.filter, self.experiment) {
            (Some(p), _) => p,
            (None, Experiment::Slam) => self.course.truth,
            (None, _) => VehicleParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.resolved_seeds().is_empty() {
            return bad("seed list is empty".into());
        }
        let samples = self.resolved_samples();
        if samples.is_empty() || samples.contains(&0) {
            return bad("sample counts must be a non-empty list of positive integers".into());
        }
        let allowed = self.experiment.methods();
        for m in self.resolved_methods() {
            if !allowed.contains(&m.as_str()) {
                return bad(format!("method {m:?} is not one of {allowed:?} for {}", self.experiment));
            }
        }
        if self.threads == Some(0) {
            return bad("thread count must be positive".into());
        }
        match self.experiment {
            Experiment::Mcl | Experiment::Slam | Experiment::GenData => {
                self.course.validate()?;
                self.filter_params().validate()
            }
            Experiment::DoubleSlit => self.double_slit.validate(),
            Experiment::Arm => {
                self.arm.plant.validate()?;
                self.arm.controller.validate()?;
                if self.perturbed_m1 > 0.0 {
                    Ok(())
                } else {
                    bad("perturbed_m1 must be positive".into())
                }
            }
            Experiment::Himmelblau => {
                let h = &self.himmelblau;
                if h.r > 0.0 && h.sigma > 0.0 && h.dt > 0.0 && h.t_final > 0.0 {
                    Ok(())
                } else {
                    bad(format!("invalid stochastic optimization settings: {h:?}"))
                }
            }
        }
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutput {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub series: Vec<Series>,
    /// Drive logs written by `gen-data`, keyed by sub-directory.
    pub logs: Vec<(String, DriveLog)>,
}

impl ExperimentOutput {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok()).count()
    }

    /// Writes `summary.csv`, `runs.csv`, the plot series and any logs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_error)?;
        if !self.runs.is_empty() {
            write_records(&dir.join(SUMMARY_FILE), &self.summary)?;
            write_records(&dir.join(RUNS_FILE), &self.runs)?;
        }
        for s in &self.series {
            s.write(dir)?;
        }
        for (sub, log) in &self.logs {
            log.write(&dir.join(sub))?;
        }
        Ok(())
    }
}

/// Runs an experiment on a dedicated pool when a thread count is configured.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    match config.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            pool.install(|| run_validated(config))
        }
        None => run_validated(config),
    }
}

#[derive(Debug, Clone)]
struct Job {
    method: String,
    samples: usize,
    seed: u64,
    /// Only the first seed writes trajectories.
    first: bool,
}

#[derive(Debug, Default)]
struct JobOutput {
    records: Vec<RunRecord>,
    series: Vec<Series>,
}

fn run_validated(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let seeds = config.resolved_seeds();
    if config.experiment == Experiment::GenData {
        return gen_logs(config, &seeds);
    }
    let samples = match config.experiment {
        Experiment::Arm => vec![0],
        _ => config.resolved_samples(),
    };
    let mut jobs = Vec::new();
    for method in config.resolved_methods() {
        // EKF SLAM has no samples; it runs once per seed.
        let counts = if method == "ekf" { vec![1] } else { samples.clone() };
        for &m in &counts {
            for (i, &seed) in seeds.iter().enumerate() {
                jobs.push(Job { method: method.clone(), samples: m, seed, first: i == 0 });
            }
        }
    }
    let outputs: Vec<JobOutput> = jobs.par_iter().map(|job| run_job(config, job)).collect();
    let mut out = ExperimentOutput::default();
    for o in outputs {
        out.runs.extend(o.records);
        for s in o.series {
            // Series with the same name from different runs share a file.
            match out.series.iter_mut().find(|t| t.name == s.name) {
                Some(t) => t.rows.extend(s.rows),
                None => out.series.push(s),
            }
        }
    }
    out.summary = summarize(&out.runs);
    let mut series = emit_plot_data(&out.summary);
    series.append(&mut out.series);
    out.series = series;
    out.series.extend(extra_series(config, seeds[0])?);
    Ok(out)
}

fn gen_logs(config: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentOutput> {
    let logs: Vec<Result<DriveLog>> = seeds.par_iter().map(|&s| gen_data(&config.course, s)).collect();
    let mut out = ExperimentOutput::default();
    for (&seed, log) in seeds.iter().zip(logs) {
        let log = log?;
        out.logs.push((format!("slam/seed_{seed}"), log.without_ids()));
        out.logs.push((format!("mcl/seed_{seed}"), log));
    }
    Ok(out)
}

fn record(job: &Job, method: &str, result: Result<(f64, f64, usize)>) -> RunRecord {
    let (error_pct, cpu_ms, fallbacks, status) = match result {
        Ok((e, t, f)) => (e, t, f, "ok".to_string()),
        Err(err) => (f64::NAN, f64::NAN, 0, err.to_string()),
    };
    RunRecord {
        method: method.to_string(),
        samples: job.samples,
        seed: job.seed,
        error_pct,
        cpu_ms,
        fallbacks,
        status,
    }
}

fn per_step_ms(config: &ExperimentConfig, start: Instant, steps: usize) -> f64 {
    if config.timing {
        1e3 * start.elapsed().as_secs_f64() / steps.max(1) as f64
    } else {
        0.0
    }
}

fn run_job(config: &ExperimentConfig, job: &Job) -> JobOutput {
    match config.experiment {
        Experiment::DoubleSlit => double_slit_job(config, job),
        Experiment::Arm => arm_job(config, job),
        Experiment::Himmelblau => himmelblau_job(config, job),
        Experiment::Mcl | Experiment::Slam => filter_job(config, job),
        Experiment::GenData => JobOutput::default(),
    }
}

fn double_slit_job(config: &ExperimentConfig, job: &Job) -> JobOutput {
    let spec = &config.double_slit;
    let start = Instant::now();
    let result = double_slit_closed_loop(spec, job.samples, job.seed);
    let cpu = per_step_ms(config, start, spec.steps());
    let mut out = JobOutput::default();
    match result {
        Ok(run) => {
            out.records.push(record(job, "implicit-x", Ok((100.0 * run.error_x, cpu, 0))));
            out.records.push(record(job, "implicit-u", Ok((100.0 * run.error_u, cpu, 0))));
            if job.first {
                let mut s = Series::new(
                    format!("double_slit_trajectory_M{}", job.samples),
                    &["t", "x_numeric", "x_analytic", "u_numeric", "u_analytic"],
                );
                for (i, &t) in run.times.iter().enumerate() {
                    let u = |v: &[f64]| v.get(i).copied().unwrap_or(f64::NAN);
                    s.push(vec![t, run.x_numeric[i], run.x_analytic[i], u(&run.u_numeric), u(&run.u_analytic)]);
                }
                out.series.push(s);
            }
        }
        Err(e) => {
            out.records.push(record(job, "implicit-x", Err(e.clone())));
            out.records.push(record(job, "implicit-u", Err(e)));
        }
    }
    out
}

fn arm_job(config: &ExperimentConfig, job: &Job) -> JobOutput {
    let mut spec = config.arm;
    if job.method == "perturbed" {
        spec.controller.m1 = config.perturbed_m1;
    }
    let start = Instant::now();
    let result = arm_closed_loop(&spec, job.seed);
    let steps = (spec.t_final / spec.dt).round() as usize;
    let cpu = per_step_ms(config, start, steps);
    let mut out = JobOutput::default();
    let target_norm = (spec.target[0].powi(2) + spec.target[1].powi(2)).sqrt();
    out.records.push(record(
        job,
        &job.method,
        result.as_ref().map(|r| (100.0 * r.final_position_error(spec.target) / target_norm, cpu, 0)).map_err(Clone::clone),
    ));
    if let Ok(run) = &result {
        let mut s = Series::new(format!("arm_final_{}", job.method), &["seed", "position_error", "speed"]);
        s.push(vec![job.seed as f64, run.final_position_error(spec.target), run.final_speed()]);
        out.series.push(s);
    }
    if let (Ok(run), true) = (result, job.first) {
        let mut s = Series::new(
            format!("arm_trajectory_{}", job.method),
            &["t", "theta1", "theta2", "theta_dot1", "theta_dot2"],
        );
        for (i, &t) in run.times.iter().enumerate() {
            s.push(vec![t, run.theta[i][0], run.theta[i][1], run.theta_dot[i][0], run.theta_dot[i][1]]);
        }
        out.series.push(s);
    }
    out
}

fn himmelblau_job(config: &ExperimentConfig, job: &Job) -> JobOutput {
    let spec = StochOptSpec { samples: job.samples, ..config.himmelblau };
    let start = Instant::now();
    let result = stochastic_optimize(&spec, job.seed);
    let cpu = per_step_ms(config, start, (spec.t_final / spec.dt).round() as usize);
    let f0 = himmelblau(spec.x0[0], spec.x0[1]);
    let mut out = JobOutput::default();
    out.records.push(record(
        job,
        &job.method,
        result.as_ref().map(|r| (100.0 * r.final_f / f0, cpu, 0)).map_err(Clone::clone),
    ));
    if let Ok(run) = result {
        let (m, seed) = (job.samples as f64, job.seed as f64);
        let mut s = Series::new("himmelblau_iterates", &["samples", "seed", "iteration", "x1", "x2", "f"]);
        for (i, (x, f)) in run.iterates.iter().zip(&run.f_values).enumerate() {
            s.push(vec![m, seed, i as f64, x[0], x[1], *f]);
        }
        out.series.push(s);
        let mut c = Series::new("himmelblau_costs", &["samples", "seed", "final_f", "cost"]);
        c.push(vec![m, seed, run.final_f, run.cost]);
        out.series.push(c);
    }
    out
}

fn filter_job(config: &ExperimentConfig, job: &Job) -> JobOutput {
    let params = config.filter_params();
    let log = gen_data(&config.course, job.seed);
    let run: Result<FilterRun> = log.as_ref().map_err(Clone::clone).and_then(|log| match config.experiment {
        Experiment::Mcl => {
            let proposal = if job.method == "implicit" { Proposal::Implicit } else { Proposal::Standard };
            run_mcl(log, &params, proposal, job.samples, job.seed, config.timing)
        }
        _ => {
            let method = match job.method.as_str() {
                "implicit" => SlamMethod::Implicit,
                "fastslam" => SlamMethod::FastSlam,
                _ => SlamMethod::Ekf,
            };
            run_slam(&log.without_ids(), &params, method, job.samples, job.seed, config.timing)
        }
    });
    let mut out = JobOutput::default();
    out.records.push(record(
        job,
        &job.method,
        run.as_ref().map(|r| (100.0 * r.error, r.cpu_ms, r.fallbacks)).map_err(Clone::clone),
    ));
    if let (Ok(run), Ok(log), true) = (run, log, job.first) {
        let mut s = Series::new(
            format!("trajectory_{}_M{}", job.method, job.samples),
            &["t", "x", "y", "beta", "true_x", "true_y", "true_beta"],
        );
        for (e, t) in run.estimates.iter().zip(&log.truth) {
            s.push(vec![t.t, e[0], e[1], e[2], t.x, t.y, t.beta]);
        }
        out.series.push(s);
    }
    out
}

/// Series that do not belong to a single run.
fn extra_series(config: &ExperimentConfig, seed: u64) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    match config.experiment {
        Experiment::DoubleSlit => {
            let spec = &config.double_slit;
            let guided = double_slit_sample_pre_wall(spec, spec.x0, 0.0, FAN_PATHS, seed, &[tag::WALKS])?;
            let mut r = rng::stream(seed, &[tag::WALKS]);
            let (unguided, unguided_hits) = double_slit_unguided_walks(spec, spec.x0, 0.0, UNGUIDED_WALKS, &mut r);
            let guided_hits = guided.paths.iter().filter(|p| double_slit_hits_wall(p, 0.0, spec)).count();
            out.push(path_fan("double_slit_guided_paths", &guided.paths, spec.dt));
            out.push(path_fan("double_slit_unguided_paths", &unguided[..FAN_PATHS.min(unguided.len())], spec.dt));
            let mut hits = Series::new("double_slit_wall_hits", &["guided_walks", "guided_hits", "unguided_walks", "unguided_hits"]);
            hits.push(vec![FAN_PATHS as f64, guided_hits as f64, UNGUIDED_WALKS as f64, unguided_hits as f64]);
            out.push(hits);
        }
        Experiment::Himmelblau => {
            let newton = newton_himmelblau(config.himmelblau.x0, 100);
            let mut s = Series::new("himmelblau_newton", &["iteration", "f"]);
            for (i, f) in newton.trace.iter().enumerate() {
                s.push(vec![i as f64, *f]);
            }
            out.push(s);
        }
        Experiment::Mcl | Experiment::Slam => {
            let log = gen_data(&config.course, seed)?;
            let mut s = Series::new("landmarks", &["id", "x", "y"]);
            for l in &log.landmarks {
                s.push(vec![f64::from(l.id), l.x, l.y]);
            }
            out.push(s);
        }
        Experiment::Arm | Experiment::GenData => {}
    }
    Ok(out)
}

/// Paths written into one file with columns `(path, t, x)`: `n + 1` rows per
/// path.
fn path_fan(name: &str, paths: &[Vec<f64>], dt: f64) -> Series {
    let mut s = Series::new(name, &["path", "t", "x"]);
    for (k, p) in paths.iter().enumerate() {
        for (i, &x) in p.iter().enumerate() {
            s.push(vec![k as f64, i as f64 * dt, x]);
        }
    }
    s
}

pub const FAN_PATHS: usize = 50;
pub const UNGUIDED_WALKS: usize = 5000;
