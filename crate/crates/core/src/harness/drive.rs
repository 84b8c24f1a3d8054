//! Synthetic drive logs and filter runs over them.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcl::{trajectory_error, LandmarkMap, MclConfig, MclFilter, Measurement, Proposal};
use crate::rng::{self, tag};
use crate::slam::{synthetic_scan, AssociationMode, EkfSlam, Observation, ParticleSlam, SlamConfig, SlamMethod};
use crate::vehicle::{propagate, propagate_with_noise, ControlInput, VehicleModel, VehicleParams, VehiclePose};

// ---------------------------------------------------------------------------
// Drive logs

/// Layout and driving schedule of the synthetic course.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CourseConfig {
    pub landmarks: usize,
    /// Side of the square course.
    pub size: f64,
    /// Radius of each loop of the figure eight (axle path).
    pub loop_radius: f64,
    /// Axle speed.
    pub speed: f64,
    /// Number of figure-eight laps.
    pub laps: f64,
    /// Control steps between laser scans.
    pub scan_period: usize,
    /// Noise used to simulate the true path; the filters use their own
    /// parameters.
    pub truth: VehicleParams,
}

impl Default for CourseConfig {
    fn default() -> Self {
        Self {
            landmarks: 12,
            size: 40.0,
            loop_radius: 8.0,
            speed: 3.0,
            laps: 1.0,
            scan_period: 8,
            truth: VehicleParams { control_noise: [0.2, 0.04], ..VehicleParams::default() },
        }
    }
}

impl CourseConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        let ok = self.landmarks > 0
            && self.size > 0.0
            && self.loop_radius > self.truth.wheel_base
            && self.speed > 0.0
            && self.laps > 0.0
            && self.scan_period > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid course: {self:?}")))
        }
    }

    /// Steering and wheel speed at time `t`: alternating left and right
    /// loops joined by smooth steering transitions.
    pub fn control_at(&self, t: f64) -> ControlInput {
        let p = &self.truth;
        let turn = (p.wheel_base / self.loop_radius).atan();
        let period = self.lap_time();
        let phase = (2.0 * PI * t / period).sin();
        // Steering follows a smoothed square wave, so each loop is mostly a
        // circle of the configured radius.
        let alpha = turn * (4.0 * phase).tanh() / 4f64.tanh();
        let v_l = self.speed * (p.wheel_base - alpha.tan() * p.width) / p.wheel_base;
        ControlInput { v_l, alpha }
    }

    /// Duration of one figure-eight lap: both loops turn the heading through
    /// a full circle.
    pub fn lap_time(&self) -> f64 {
        let p = &self.truth;
        let turn = (p.wheel_base / self.loop_radius).atan();
        // Heading rate averaged over a half period of the steering profile.
        let n = 2000;
        let mean_rate: f64 = (0..n)
            .map(|i| {
                let s = (PI * (i as f64 + 0.5) / n as f64).sin();
                let alpha = turn * (4.0 * s).tanh() / 4f64.tanh();
                self.speed * alpha.tan() / p.wheel_base
            })
            .sum::<f64>()
            / n as f64;
        2.0 * (2.0 * PI / mean_rate)
    }

    pub fn steps(&self) -> usize {
        (self.laps * self.lap_time() / self.truth.dt).round() as usize
    }

    /// Start pose, heading north-east, placed so that the noise-free path is
    /// centred in the square.
    pub fn start_pose(&self) -> Result<VehiclePose> {
        let mut pose = VehiclePose::new(0.0, 0.0, PI / 4.0);
        let (mut lo, mut hi) = (Vector2::new(0.0, 0.0), Vector2::new(0.0, 0.0));
        for n in 0..self.steps() {
            let u = self.control_at(n as f64 * self.truth.dt);
            pose = propagate_with_noise(&pose, &u, &self.truth, &Vector3::zeros())?;
            lo = lo.inf(&pose.position());
            hi = hi.sup(&pose.position());
        }
        let c = Vector2::repeat(self.size / 2.0) - (lo + hi) / 2.0;
        Ok(VehiclePose::new(c[0], c[1], PI / 4.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub t: f64,
    pub v_l: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub t: f64,
    /// Control step at which the scan was taken.
    pub step: usize,
    /// Landmark id, `-1` when hidden.
    pub id: i64,
    pub range: f64,
    pub bearing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRow {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

/// A drive: controls `u_0..u_{N-1}`, true poses `x_0..x_N`, scans taken at
/// the true poses, and the landmark layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveLog {
    pub controls: Vec<ControlRow>,
    pub scans: Vec<ScanRow>,
    pub truth: Vec<TruthRow>,
    pub landmarks: Vec<LandmarkRow>,
}

pub const CONTROLS_FILE: &str = "controls.csv";
pub const SCANS_FILE: &str = "scans.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const LANDMARKS_FILE: &str = "landmarks.csv";

pub(crate) fn io_error(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_error)?;
    for r in rows {
        w.serialize(r).map_err(io_error)?;
    }
    w.flush().map_err(io_error)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(io_error)?;
    r.deserialize().map(|row| row.map_err(io_error)).collect()
}

impl DriveLog {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    /// Writes the four log files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_error)?;
        write_rows(&dir.join(CONTROLS_FILE), &self.controls)?;
        write_rows(&dir.join(SCANS_FILE), &self.scans)?;
        write_rows(&dir.join(TRUTH_FILE), &self.truth)?;
        write_rows(&dir.join(LANDMARKS_FILE), &self.landmarks)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            controls: read_rows(&dir.join(CONTROLS_FILE))?,
            scans: read_rows(&dir.join(SCANS_FILE))?,
            truth: read_rows(&dir.join(TRUTH_FILE))?,
            landmarks: read_rows(&dir.join(LANDMARKS_FILE))?,
        })
    }

    /// The same log with landmark ids removed from the scans.
    pub fn without_ids(&self) -> Self {
        let mut log = self.clone();
        for s in &mut log.scans {
            s.id = -1;
        }
        log
    }

    pub fn truth_poses(&self) -> Vec<DVector<f64>> {
        self.truth.iter().map(|r| DVector::from_vec(vec![r.x, r.y, r.beta])).collect()
    }

    pub fn landmark_map(&self) -> Result<LandmarkMap> {
        LandmarkMap::new(self.landmarks.iter().map(|l| (l.id, Vector2::new(l.x, l.y))))
    }

    /// Scans indexed by control step (`None` where no scan was taken).
    pub fn scans_by_step(&self) -> Vec<Option<ScanRow>> {
        let mut by_step = vec![None; self.steps() + 1];
        for s in &self.scans {
            if s.step < by_step.len() {
                by_step[s.step] = Some(*s);
            }
        }
        by_step
    }
}

/// Landmarks on a jittered grid covering the square: one per cell, placed in
/// the middle half of the cell.
pub fn landmark_layout(course: &CourseConfig, seed: u64) -> Vec<LandmarkRow> {
    use rand::Rng;
    let mut r = rng::stream(seed, &[tag::LAYOUT]);
    let n = course.landmarks;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (w, h) = (course.size / cols as f64, course.size / rows as f64);
    (0..n)
        .map(|k| {
            let (i, j) = (k % cols, k / cols);
            LandmarkRow {
                id: k as u32,
                x: w * (i as f64 + r.random_range(0.25..0.75)),
                y: h * (j as f64 + r.random_range(0.25..0.75)),
            }
        })
        .collect()
}

/// Simulates a drive on the course: true path, controls and laser scans.
pub fn gen_data(course: &CourseConfig, seed: u64) -> Result<DriveLog> {
    course.validate()?;
    let p = &course.truth;
    let landmarks = landmark_layout(course, seed);
    let lm: Vec<(u32, Vector2<f64>)> = landmarks.iter().map(|l| (l.id, Vector2::new(l.x, l.y))).collect();
    let steps = course.steps();
    let mut pose = course.start_pose()?;
    let mut drive = rng::stream(seed, &[tag::DRIVE]);
    let mut controls = Vec::with_capacity(steps);
    let mut truth = Vec::with_capacity(steps + 1);
    let mut scans = Vec::new();
    truth.push(TruthRow { t: 0.0, x: pose.x, y: pose.y, beta: pose.beta });
    for n in 0..steps {
        let t = n as f64 * p.dt;
        let u = course.control_at(t);
        controls.push(ControlRow { t, v_l: u.v_l, alpha: u.alpha });
        pose = propagate(&pose, &u, p, &mut drive)?;
        let t1 = (n + 1) as f64 * p.dt;
        truth.push(TruthRow { t: t1, x: pose.x, y: pose.y, beta: pose.beta });
        if (n + 1) % course.scan_period == 0 {
            let mut r = rng::stream(seed, &[tag::SCAN, (n + 1) as u64]);
            if let Some((z, id)) = synthetic_scan(&pose, &lm, p, &mut r)? {
                scans.push(ScanRow { t: t1, step: n + 1, id: i64::from(id), range: z.range, bearing: z.bearing });
            }
        }
    }
    Ok(DriveLog { controls, scans, truth, landmarks })
}

// ---------------------------------------------------------------------------
// Filter runs on drive logs

/// Result of running one filter over one drive.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub estimates: Vec<DVector<f64>>,
    /// Relative trajectory error (a fraction, not a percentage).
    pub error: f64,
    /// Mean wall-clock time per filter step, in milliseconds (zero when timing
    /// is disabled).
    pub cpu_ms: f64,
    pub fallbacks: usize,
}

fn controls_of(log: &DriveLog) -> Vec<ControlInput> {
    log.controls.iter().map(|c| ControlInput { v_l: c.v_l, alpha: c.alpha }).collect()
}

fn finish(log: &DriveLog, estimates: Vec<DVector<f64>>, elapsed: f64, timing: bool, fallbacks: usize) -> FilterRun {
    let error = trajectory_error(&estimates, &log.truth_poses());
    let cpu_ms = if timing { 1e3 * elapsed / log.steps().max(1) as f64 } else { 0.0 };
    FilterRun { estimates, error, cpu_ms, fallbacks }
}

/// Localisation with known landmarks, starting from the true initial pose.
pub fn run_mcl(
    log: &DriveLog,
    params: &VehicleParams,
    proposal: Proposal,
    particles: usize,
    seed: u64,
    timing: bool,
) -> Result<FilterRun> {
    let model = VehicleModel::new(*params);
    let map = log.landmark_map()?;
    let controls = controls_of(log);
    let scans = log.scans_by_step();
    let x0 = log.truth_poses()[0].clone();
    let config = MclConfig { particles, proposal, seed, ..Default::default() };
    let mut filter = MclFilter::new(&model, &map, config, &x0, None, &controls[0])?;
    let mut estimates = vec![filter.estimate()];
    let mut elapsed = 0.0;
    for (n, u) in controls.iter().enumerate() {
        let measurements: Vec<Measurement> = match scans[n + 1] {
            Some(s) if s.id >= 0 => vec![Measurement { id: s.id as u32, z: Vector2::new(s.range, s.bearing) }],
            _ => Vec::new(),
        };
        let start = Instant::now();
        filter.step(u, &measurements)?;
        elapsed += start.elapsed().as_secs_f64();
        estimates.push(filter.estimate());
    }
    Ok(finish(log, estimates, elapsed, timing, filter.fallbacks))
}

/// SLAM with maximum-likelihood data association (landmark ids in the log
/// are not used), starting from the true initial pose.
pub fn run_slam(
    log: &DriveLog,
    params: &VehicleParams,
    method: SlamMethod,
    particles: usize,
    seed: u64,
    timing: bool,
) -> Result<FilterRun> {
    let model = VehicleModel::new(*params);
    let controls = controls_of(log);
    let scans = log.scans_by_step();
    let x0 = log.truth_poses()[0].clone();
    let observation = |n: usize| {
        scans[n].map(|s| Observation { z: Vector2::new(s.range, s.bearing), id: None })
    };
    let mut estimates = Vec::with_capacity(controls.len() + 1);
    let mut elapsed = 0.0;
    let fallbacks = match method {
        SlamMethod::Ekf => {
            let cov = nalgebra::DMatrix::identity(3, 3) * 1e-9;
            let mut ekf = EkfSlam::new(&model, &x0, &cov, crate::slam::DEFAULT_GATE, AssociationMode::MaximumLikelihood);
            estimates.push(ekf.estimate());
            for (n, u) in controls.iter().enumerate() {
                let obs = observation(n + 1);
                let start = Instant::now();
                ekf.step(u, obs.as_ref())?;
                elapsed += start.elapsed().as_secs_f64();
                estimates.push(ekf.estimate());
            }
            ekf.repairs
        }
        _ => {
            let config = SlamConfig { particles, method, seed, ..Default::default() };
            let mut filter = ParticleSlam::new(&model, config, &x0, None, &controls[0])?;
            estimates.push(filter.estimate());
            for (n, u) in controls.iter().enumerate() {
                let obs = observation(n + 1);
                let start = Instant::now();
                filter.step(u, obs.as_ref())?;
                elapsed += start.elapsed().as_secs_f64();
                estimates.push(filter.estimate());
            }
            filter.fallbacks
        }
    };
    Ok(finish(log, estimates, elapsed, timing, fallbacks))
}
