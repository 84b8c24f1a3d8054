//! Shared pieces of the integration tests: a dense Kalman filter and a
//! simulator for the linear-Gaussian world (written with nalgebra and rand
//! only, independent of the filter code), plus runners that drive the
//! library's filters over a simulated world.
#![allow(dead_code)]

use implicit_sampling::filter::LinearSurrogate;
use implicit_sampling::mcl::{LandmarkMap, MclConfig, MclFilter, Measurement, Proposal};
use implicit_sampling::slam::{AssociationMode, EkfSlam, Observation, ParticleSlam, SlamConfig, SlamMethod, DEFAULT_GATE};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense Kalman filter over a planar pose followed by planar landmarks, for
/// `x' = x + u + N(0, Q)` and `z = m_k - x + N(0, R)`.
#[derive(Debug, Clone)]
pub struct JointKalman {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub ids: Vec<u32>,
}

impl JointKalman {
    pub fn new(x0: Vector2<f64>, p0: Matrix2<f64>) -> Self {
        Self {
            mean: DVector::from_column_slice(x0.as_slice()),
            cov: DMatrix::from_column_slice(2, 2, p0.as_slice()),
            ids: Vec::new(),
        }
    }

    pub fn pose(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }

    pub fn pose_var(&self) -> Vector2<f64> {
        Vector2::new(self.cov[(0, 0)], self.cov[(1, 1)])
    }

    fn slot(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&i| i == id).map(|k| 2 + 2 * k)
    }

    pub fn landmark(&self, id: u32) -> Vector2<f64> {
        let i = self.slot(id).expect("landmark in state");
        Vector2::new(self.mean[i], self.mean[i + 1])
    }

    pub fn landmark_var(&self, id: u32) -> Vector2<f64> {
        let i = self.slot(id).expect("landmark in state");
        Vector2::new(self.cov[(i, i)], self.cov[(i + 1, i + 1)])
    }

    pub fn predict(&mut self, u: &Vector2<f64>, q: &Matrix2<f64>) {
        self.mean[0] += u[0];
        self.mean[1] += u[1];
        for r in 0..2 {
            for c in 0..2 {
                self.cov[(r, c)] += q[(r, c)];
            }
        }
    }

    /// Update with a landmark whose position is known exactly.
    pub fn update_known(&mut self, m: &Vector2<f64>, z: &Vector2<f64>, r: &Matrix2<f64>) {
        let n = self.mean.len();
        let mut h = DMatrix::zeros(2, n);
        h[(0, 0)] = -1.0;
        h[(1, 1)] = -1.0;
        let predicted = DVector::from_vec(vec![m[0] - self.mean[0], m[1] - self.mean[1]]);
        self.update(&h, &predicted, z, r);
    }

    /// Update with a landmark carried in the state, adding it on first sight
    /// (flat prior, so the pose is not corrected by its first observation).
    pub fn observe(&mut self, id: u32, z: &Vector2<f64>, r: &Matrix2<f64>) {
        let Some(i) = self.slot(id) else {
            let n = self.mean.len();
            let mut mean = self.mean.clone().insert_rows(n, 2, 0.0);
            mean[n] = self.mean[0] + z[0];
            mean[n + 1] = self.mean[1] + z[1];
            let mut cov = DMatrix::zeros(n + 2, n + 2);
            cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
            // m = x + z: cross covariance is the pose rows.
            for c in 0..n {
                for k in 0..2 {
                    cov[(n + k, c)] = self.cov[(k, c)];
                    cov[(c, n + k)] = self.cov[(c, k)];
                }
            }
            for a in 0..2 {
                for b in 0..2 {
                    cov[(n + a, n + b)] = self.cov[(a, b)] + r[(a, b)];
                }
            }
            self.mean = mean;
            self.cov = cov;
            self.ids.push(id);
            return;
        };
        let n = self.mean.len();
        let mut h = DMatrix::zeros(2, n);
        h[(0, 0)] = -1.0;
        h[(1, 1)] = -1.0;
        h[(0, i)] = 1.0;
        h[(1, i + 1)] = 1.0;
        let predicted = &h * &self.mean;
        self.update(&h, &predicted, z, r);
    }

    fn update(&mut self, h: &DMatrix<f64>, predicted: &DVector<f64>, z: &Vector2<f64>, r: &Matrix2<f64>) {
        let r = DMatrix::from_column_slice(2, 2, r.as_slice());
        let s = h * &self.cov * h.transpose() + &r;
        let k = &self.cov * h.transpose() * s.try_inverse().expect("SPD innovation covariance");
        let nu = DVector::from_column_slice(z.as_slice()) - predicted;
        self.mean += &k * nu;
        let n = self.mean.len();
        let a = DMatrix::identity(n, n) - &k * h;
        self.cov = &a * &self.cov * a.transpose() + &k * r * k.transpose();
    }
}

/// One simulated run of the linear world.
#[derive(Debug, Clone)]
pub struct LinearWorld {
    pub x0: Vector2<f64>,
    pub controls: Vec<Vector2<f64>>,
    pub truth: Vec<Vector2<f64>>,
    /// `(landmark id, z)` observed after each control.
    pub observations: Vec<(u32, Vector2<f64>)>,
    pub landmarks: Vec<(u32, Vector2<f64>)>,
}

fn correlated(cov: &Matrix2<f64>, rng: &mut ChaCha8Rng) -> Vector2<f64> {
    let l = cov.cholesky().expect("SPD").l();
    let xi = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
    l * xi
}

/// Simulates `steps` controls; the landmarks are observed in turn.
pub fn linear_world(q: &Matrix2<f64>, r: &Matrix2<f64>, steps: usize, seed: u64) -> LinearWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let landmarks = vec![(0, Vector2::new(4.0, 2.0)), (1, Vector2::new(-1.0, 5.0))];
    let x0 = Vector2::new(0.0, 0.0);
    let mut x = x0;
    let mut world = LinearWorld { x0, controls: Vec::new(), truth: Vec::new(), observations: Vec::new(), landmarks };
    for k in 0..steps {
        let u = Vector2::new(0.4, 0.1 * (k as f64).cos());
        x += u + correlated(q, &mut rng);
        let (id, m) = world.landmarks[k % world.landmarks.len()];
        let z = m - x + correlated(r, &mut rng);
        world.controls.push(u);
        world.truth.push(x);
        world.observations.push((id, z));
    }
    world
}

/// Sample mean and standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn to_d(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 2, m.as_slice())
}

fn vec2(v: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}

/// Kalman oracle over the whole world, with the landmarks either known
/// (localisation) or estimated (SLAM).
pub fn kalman_oracle(model: &LinearSurrogate, world: &LinearWorld, p0: &Matrix2<f64>, known_map: bool) -> JointKalman {
    let mut kf = JointKalman::new(world.x0, *p0);
    for (u, (id, z)) in world.controls.iter().zip(&world.observations) {
        kf.predict(u, &model.process_cov);
        if known_map {
            let m = world.landmarks.iter().find(|l| l.0 == *id).expect("landmark").1;
            kf.update_known(&m, z, &model.sensor_cov);
        } else {
            kf.observe(*id, z, &model.sensor_cov);
        }
    }
    kf
}

/// Final pose estimate of a localisation filter.
pub fn run_mcl(model: &LinearSurrogate, world: &LinearWorld, p0: &Matrix2<f64>, proposal: Proposal, particles: usize, seed: u64) -> Vector2<f64> {
    let map = LandmarkMap::new(world.landmarks.iter().copied()).expect("unique ids");
    let config = MclConfig { particles, proposal, seed, ..MclConfig::default() };
    let x0 = DVector::from_column_slice(world.x0.as_slice());
    let mut filter = MclFilter::new(model, &map, config, &x0, Some(&to_d(p0)), &world.controls[0]).expect("filter");
    for (u, (id, z)) in world.controls.iter().zip(&world.observations) {
        filter.step(u, &[Measurement { id: *id, z: *z }]).expect("step");
    }
    vec2(&filter.estimate())
}

/// Final pose estimate and landmark estimates (in id order) of a SLAM filter.
pub struct SlamEstimate {
    pub pose: Vector2<f64>,
    pub landmarks: Vec<Vector2<f64>>,
}

pub fn run_particle_slam(
    model: &LinearSurrogate,
    world: &LinearWorld,
    p0: &Matrix2<f64>,
    method: SlamMethod,
    particles: usize,
    seed: u64,
) -> SlamEstimate {
    let config = SlamConfig { particles, method, seed, association: AssociationMode::Known, ..SlamConfig::default() };
    let x0 = DVector::from_column_slice(world.x0.as_slice());
    let mut filter = ParticleSlam::new(model, config, &x0, Some(&to_d(p0)), &world.controls[0]).expect("filter");
    for (u, (id, z)) in world.controls.iter().zip(&world.observations) {
        filter.step(u, Some(&Observation { z: *z, id: Some(*id) })).expect("step");
    }
    let w = filter.weights();
    let landmarks = world
        .landmarks
        .iter()
        .map(|(id, _)| {
            filter.particles().iter().zip(&w).fold(Vector2::zeros(), |acc, (p, wj)| {
                let f = p.features.iter().find(|f| f.id == *id).expect("feature mapped");
                acc + f.mean * *wj
            })
        })
        .collect();
    SlamEstimate { pose: vec2(&filter.estimate()), landmarks }
}

pub fn run_ekf_slam(model: &LinearSurrogate, world: &LinearWorld, p0: &Matrix2<f64>) -> SlamEstimate {
    let x0 = DVector::from_column_slice(world.x0.as_slice());
    let mut ekf = EkfSlam::new(model, &x0, &to_d(p0), DEFAULT_GATE, AssociationMode::Known);
    for (u, (id, z)) in world.controls.iter().zip(&world.observations) {
        ekf.step(u, Some(&Observation { z: *z, id: Some(*id) })).expect("step");
    }
    let landmarks = world
        .landmarks
        .iter()
        .map(|(id, _)| {
            let k = (0..ekf.feature_count()).find(|&k| ekf.feature(k).id == *id).expect("feature mapped");
            ekf.feature(k).mean
        })
        .collect();
    SlamEstimate { pose: vec2(&ekf.estimate()), landmarks }
}
