//! Landmark SLAM: a synthetic laser, maximum-likelihood data association, and
//! three filters.
//!
//! * Implicit sampling: each particle jointly samples its new pose and the
//!   position of the observed feature from the step posterior (motion prior,
//!   feature prior, likelihood), then keeps a Gaussian estimate of the feature
//!   conditioned on the sampled pose.
//! * FastSLAM 1.0: poses from the motion model, one small EKF per feature.
//! * EKF SLAM: a single Gaussian over the pose and all features.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{
    deferred_predict, gaussian_log_density, needs_finite_differences, sample_pose, StateSpaceModel, StepObjective,
};
use crate::mcl::{initial_poses, maybe_resample, renormalize};
use crate::numerics::{cholesky, symmetrize, NewtonOptions};
use crate::rng::{self, tag};
use crate::sampler::{prepare, sample_with, standard_normal_vector, JacobianForm, MapKind};
use crate::vehicle::{measure, RangeBearing, VehicleParams, VehiclePose};

/// Maximum range of the synthetic laser.
pub const SCAN_RADIUS: f64 = 15.0;

/// 0.99 quantile of the chi-square distribution with two degrees of freedom.
pub const DEFAULT_GATE: f64 = 9.21;


/// Picks one landmark uniformly among those within [`SCAN_RADIUS`] in the
/// half plane ahead of the vehicle and returns its noisy measurement and index.
pub fn synthetic_scan(
    pose: &VehiclePose,
    landmarks: &[(u32, Vector2<f64>)],
    params: &VehicleParams,
    rng: &mut impl Rng,
) -> Result<Option<(RangeBearing, u32)>> {
    let (s, c) = pose.beta.sin_cos();
    let visible: Vec<&(u32, Vector2<f64>)> = landmarks
        .iter()
        .filter(|(_, m)| {
            let (ex, ey) = (m[0] - pose.x, m[1] - pose.y);
            ex.hypot(ey) <= SCAN_RADIUS && ex * c + ey * s > 0.0
        })
        .collect();
    if visible.is_empty() {
        return Ok(None);
    }
    let (id, m) = visible[rng.random_range(0..visible.len())];
    loop {
        let z = measure(pose, m, params, rng)?;
        // Noise can push a landmark right at the edge to a negative range;
        // the laser never reports one.
        if z.range >= 0.0 {
            return Ok(Some((z, *id)));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureEstimate {
    pub id: u32,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamParticle {
    /// Pose, or its noise-free prediction while noise is deferred.
    pub pose: DVector<f64>,
    /// Process noise covariance accumulated since the last observation when
    /// noise is deferred.
    pub pending_cov: Option<DMatrix<f64>>,
    pub features: Vec<FeatureEstimate>,
    pub log_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Association {
    /// Index into the particle's feature list.
    Known { index: usize, d2: f64 },
    /// `d2` is the smallest squared Mahalanobis distance found (infinite for an
    /// empty map).
    New { d2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    /// Nearest feature in Mahalanobis distance, gated.
    #[default]
    MaximumLikelihood,
    /// Use the landmark identity carried by the observation.
    Known,
}

/// One laser return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub z: Vector2<f64>,
    /// True landmark identity, used only with [`AssociationMode::Known`].
    pub id: Option<u32>,
}

/// Innovation `z - h` and its covariance for an observation of `feature` from
/// `pose`, optionally including pose uncertainty.
fn innovation<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    pose_cov: Option<&DMatrix<f64>>,
    feature: &FeatureEstimate,
    z: &Vector2<f64>,
) -> Result<(Vector2<f64>, Matrix2<f64>, DMatrix<f64>)> {
    let n = pose.len();
    let h = model.observe(pose, &feature.mean)?;
    let nu = -model.observation_residual(&h, z);
    let der = model.observe_derivatives(pose, &feature.mean)?;
    let jm = der.jacobian.fixed_view::<2, 2>(0, n).into_owned();
    let mut s = jm * feature.cov * jm.transpose() + model.sensor_cov();
    if let Some(p) = pose_cov {
        let jx = der.jacobian.columns(0, n);
        let sp = jx * p * jx.transpose();
        s += Matrix2::new(sp[(0, 0)], sp[(0, 1)], sp[(1, 0)], sp[(1, 1)]);
    }
    Ok((nu, s, der.jacobian))
}

fn mahalanobis(nu: &Vector2<f64>, s: &Matrix2<f64>) -> f64 {
    s.try_inverse().map_or(f64::INFINITY, |inv| nu.dot(&(inv * nu)))
}

/// Maximum-likelihood association of `z` with a particle's features.
pub fn associate<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    pose_cov: Option<&DMatrix<f64>>,
    features: &[FeatureEstimate],
    z: &Vector2<f64>,
    gate: f64,
) -> Association {
    let mut best: Option<(usize, f64)> = None;
    for (k, f) in features.iter().enumerate() {
        let Ok((nu, s, _)) = innovation(model, pose, pose_cov, f, z) else {
            continue;
        };
        let d2 = mahalanobis(&nu, &s);
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((k, d2));
        }
    }
    match best {
        Some((index, d2)) if d2 <= gate => Association::Known { index, d2 },
        Some((_, d2)) => Association::New { d2 },
        None => Association::New { d2: f64::INFINITY },
    }
}

fn associate_with_mode<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    pose_cov: Option<&DMatrix<f64>>,
    features: &[FeatureEstimate],
    obs: &Observation,
    mode: AssociationMode,
    gate: f64,
) -> Association {
    match (mode, obs.id) {
        (AssociationMode::Known, Some(id)) => match features.iter().position(|f| f.id == id) {
            Some(index) => Association::Known { index, d2: 0.0 },
            None => Association::New { d2: f64::INFINITY },
        },
        _ => associate(model, pose, pose_cov, features, &obs.z, gate),
    }
}

/// Gaussian estimate of a new feature: the inverted observation, with the
/// sensor covariance mapped through the inverse observation.
pub fn init_feature<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    z: &Vector2<f64>,
    id: u32,
) -> Result<FeatureEstimate> {
    let inv = model.invert_observation(pose, z)?;
    Ok(FeatureEstimate {
        id,
        mean: inv.landmark,
        cov: inv.d_z * model.sensor_cov() * inv.d_z.transpose(),
    })
}

/// Log density assigned to an observation that starts a new feature: uniform
/// over ranges in [0, SCAN_RADIUS] and bearings over the forward half-circle.
pub fn new_feature_log_likelihood() -> f64 {
    -(SCAN_RADIUS * PI).ln()
}

fn ekf_feature_update(
    feature: &mut FeatureEstimate,
    nu: &Vector2<f64>,
    s: &Matrix2<f64>,
    jm: &Matrix2<f64>,
    sensor: &Matrix2<f64>,
) -> Result<()> {
    let s_inv = s.try_inverse().ok_or(Error::NotPositiveDefinite { pivot: 0, value: s.determinant() })?;
    let k = feature.cov * jm.transpose() * s_inv;
    feature.mean += k * nu;
    let a = Matrix2::identity() - k * jm;
    let cov = a * feature.cov * a.transpose() + k * sensor * k.transpose();
    feature.cov = (cov + cov.transpose()) * 0.5;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlamMethod {
    Implicit,
    FastSlam,
    Ekf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamConfig {
    pub particles: usize,
    pub method: SlamMethod,
    pub map: MapKind,
    pub jacobian: JacobianForm,
    pub gate: f64,
    pub association: AssociationMode,
    pub resample_fraction: f64,
    pub seed: u64,
    pub newton: NewtonOptions,
    /// Implicit method only; see [`crate::mcl::MclConfig::defer_noise`].
    pub defer_noise: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            particles: 100,
            method: SlamMethod::Implicit,
            map: MapKind::Quadratic,
            jacobian: JacobianForm::FiniteDifference,
            gate: DEFAULT_GATE,
            association: AssociationMode::MaximumLikelihood,
            resample_fraction: 0.5,
            seed: 0,
            newton: NewtonOptions::default(),
            defer_noise: true,
        }
    }
}

/// Particle SLAM with the implicit or the FastSLAM proposal.
pub struct ParticleSlam<'a, M: StateSpaceModel> {
    model: &'a M,
    config: SlamConfig,
    particles: Vec<SlamParticle>,
    step: u64,
    finite_differences: bool,
    pub fallbacks: usize,
    pub resamples: usize,
}

struct Moved {
    pose: DVector<f64>,
    pending_cov: Option<DMatrix<f64>>,
    features: Vec<FeatureEstimate>,
    increment: f64,
    fell_back: bool,
}

impl<'a, M: StateSpaceModel> ParticleSlam<'a, M> {
    pub fn new(
        model: &'a M,
        config: SlamConfig,
        pose: &DVector<f64>,
        initial_cov: Option<&DMatrix<f64>>,
        control: &M::Control,
    ) -> Result<Self> {
        if config.particles == 0 {
            return Err(Error::InvalidConfig("at least one particle is required".into()));
        }
        if config.method == SlamMethod::Ekf {
            return Err(Error::InvalidConfig("EKF SLAM is not a particle method".into()));
        }
        let finite_differences = if config.method == SlamMethod::Implicit {
            // Probe the derivatives with a landmark a few metres away.
            let probe = model.invert_observation(pose, &Vector2::new(5.0, 0.3))?.landmark;
            needs_finite_differences(model, pose, control, &probe)?
        } else {
            false
        };
        let lw = -(config.particles as f64).ln();
        let particles = initial_poses(model, pose, initial_cov, config.particles, config.seed)?
            .into_iter()
            .map(|pose| SlamParticle { pose, pending_cov: None, features: Vec::new(), log_weight: lw })
            .collect();
        Ok(Self {
            model,
            config,
            particles,
            step: 0,
            finite_differences,
            fallbacks: 0,
            resamples: 0,
        })
    }

    pub fn particles(&self) -> &[SlamParticle] {
        &self.particles
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }

    pub fn estimate(&self) -> DVector<f64> {
        let poses: Vec<DVector<f64>> = self.particles.iter().map(|p| p.pose.clone()).collect();
        self.model.mean_pose(&poses, &self.weights())
    }

    /// Per-feature EKF update of a particle at a given pose.
    fn feature_update(&self, pose: &DVector<f64>, features: &mut Vec<FeatureEstimate>, obs: &Observation) -> Result<f64> {
        let model = self.model;
        let a = associate_with_mode(model, pose, None, features, obs, self.config.association, self.config.gate);
        match a {
            Association::Known { index, .. } => {
                let (nu, s, jac) = innovation(model, pose, None, &features[index], &obs.z)?;
                let jm = jac.fixed_view::<2, 2>(0, pose.len()).into_owned();
                let increment = gaussian_log_density(&nu, &s)?;
                ekf_feature_update(&mut features[index], &nu, &s, &jm, &model.sensor_cov())?;
                Ok(increment)
            }
            Association::New { .. } => {
                let id = obs.id.filter(|_| self.config.association == AssociationMode::Known);
                let id = id.unwrap_or(features.len() as u32);
                features.push(init_feature(model, pose, &obs.z, id)?);
                Ok(new_feature_log_likelihood())
            }
        }
    }

    /// Samples the pose from its prior and updates the features at it.
    fn bootstrap_move(
        &self,
        p: &SlamParticle,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        obs: Option<&Observation>,
        r: &mut rng::StreamRng,
    ) -> Result<Moved> {
        let pose = sample_pose(self.model, mean, cov, r)?;
        let mut features = p.features.clone();
        let increment = match obs {
            Some(o) => self.feature_update(&pose, &mut features, o)?,
            None => 0.0,
        };
        Ok(Moved { pose, pending_cov: None, features, increment, fell_back: false })
    }

    /// Joint implicit sampling of the pose and the observed feature. Returns
    /// `None` when the observation starts a new feature.
    fn implicit_move(
        &self,
        p: &SlamParticle,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        obs: &Observation,
        r: &mut rng::StreamRng,
    ) -> Result<Option<Moved>> {
        let model = self.model;
        let n = mean.len();
        let a = associate_with_mode(model, mean, Some(cov), &p.features, obs, self.config.association, self.config.gate);
        let Association::Known { index, .. } = a else {
            return Ok(None);
        };
        let prior = p.features[index];
        let obj = StepObjective::new(model, mean.clone(), cov)?
            .with_free_landmark(prior.mean, &prior.cov, obs.z)?
            .with_finite_differences(self.finite_differences);
        let prep = prepare(&obj, &obj.initial_guess(), &self.config.newton)?;
        let xi = standard_normal_vector(prep.dim(), r);
        let s = sample_with(&obj, &prep, &xi, self.config.map, self.config.jacobian)?;
        let increment = obj.log_marginal(&prep, &s);
        if !increment.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        // Feature given the sampled pose under the Laplace approximation:
        // mean mu_m - H_mm^-1 H_mx (x - mu_x), covariance H_mm^-1.
        let h = &prep.hessian;
        let hmm = h.fixed_view::<2, 2>(n, n).into_owned();
        let hmm_inv = hmm.try_inverse().ok_or(Error::NotPositiveDefinite { pivot: n, value: hmm.determinant() })?;
        let hmx = h.view((n, 0), (2, n));
        let dx = s.x.rows(0, n) - prep.mu.rows(0, n);
        let shift = hmm_inv * (hmx * dx);
        let mut features = p.features.clone();
        features[index].mean = Vector2::new(prep.mu[n] - shift[0], prep.mu[n + 1] - shift[1]);
        features[index].cov = (hmm_inv + hmm_inv.transpose()) * 0.5;
        Ok(Some(Moved {
            pose: model.normalize_pose(s.x.rows(0, n).into_owned()),
            pending_cov: None,
            features,
            increment,
            fell_back: false,
        }))
    }

    fn move_particle(&self, j: usize, p: &SlamParticle, u: &M::Control, obs: Option<&Observation>) -> Result<Moved> {
        let (seed, step) = (self.config.seed, self.step);
        let mut r = rng::stream(seed, &[tag::PARTICLE, step, j as u64]);
        let implicit = self.config.method == SlamMethod::Implicit;
        let defer = implicit && self.config.defer_noise;
        let pending = if defer { p.pending_cov.as_ref() } else { None };
        let (mean, cov) = deferred_predict(self.model, &p.pose, pending, u)?;
        match obs {
            None if defer => Ok(Moved {
                pose: mean,
                pending_cov: Some(cov),
                features: p.features.clone(),
                increment: 0.0,
                fell_back: false,
            }),
            Some(o) if implicit => match self.implicit_move(p, &mean, &cov, o, &mut r) {
                Ok(Some(m)) => Ok(m),
                // A new feature carries no information about the pose.
                Ok(None) => self.bootstrap_move(p, &mean, &cov, obs, &mut r),
                Err(_) => {
                    let mut r = rng::stream(seed, &[tag::PARTICLE, step, j as u64, 1]);
                    let m = self.bootstrap_move(p, &mean, &cov, obs, &mut r)?;
                    Ok(Moved { fell_back: true, ..m })
                }
            },
            _ => self.bootstrap_move(p, &mean, &cov, obs, &mut r),
        }
    }

    pub fn step(&mut self, u: &M::Control, obs: Option<&Observation>) -> Result<()> {
        self.step += 1;
        let (seed, step) = (self.config.seed, self.step);
        let moved: Vec<Result<Moved>> = self
            .particles
            .par_iter()
            .enumerate()
            .map(|(j, p)| self.move_particle(j, p, u, obs))
            .collect();
        let mut log_weights = Vec::with_capacity(moved.len());
        let mut next = Vec::with_capacity(moved.len());
        for (p, m) in self.particles.iter().zip(moved) {
            let m = m?;
            log_weights.push(p.log_weight + m.increment);
            self.fallbacks += usize::from(m.fell_back);
            next.push(SlamParticle { pose: m.pose, pending_cov: m.pending_cov, features: m.features, log_weight: 0.0 });
        }
        renormalize(&mut log_weights)?;
        for (p, lw) in next.iter_mut().zip(&log_weights) {
            p.log_weight = *lw;
        }
        self.particles = match maybe_resample(&log_weights, self.config.resample_fraction, seed, step) {
            Some(idx) => {
                self.resamples += 1;
                let lw = -(idx.len() as f64).ln();
                idx.into_iter().map(|i| SlamParticle { log_weight: lw, ..next[i].clone() }).collect()
            }
            None => next,
        };
        Ok(())
    }
}

/// Extended Kalman filter over the pose and all mapped features.
pub struct EkfSlam<'a, M: StateSpaceModel> {
    model: &'a M,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    ids: Vec<u32>,
    gate: f64,
    association: AssociationMode,
    /// Covariance repairs (symmetrisation plus jitter) performed.
    pub repairs: usize,
}

impl<'a, M: StateSpaceModel> EkfSlam<'a, M> {
    pub fn new(model: &'a M, pose: &DVector<f64>, cov: &DMatrix<f64>, gate: f64, association: AssociationMode) -> Self {
        Self {
            model,
            mean: pose.clone(),
            cov: cov.clone(),
            ids: Vec::new(),
            gate,
            association,
            repairs: 0,
        }
    }

    pub fn estimate(&self) -> DVector<f64> {
        let n = self.model.pose_dim();
        self.mean.rows(0, n).into_owned()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn feature_count(&self) -> usize {
        self.ids.len()
    }

    pub fn feature(&self, k: usize) -> FeatureEstimate {
        let n = self.model.pose_dim();
        let i = n + 2 * k;
        FeatureEstimate {
            id: self.ids[k],
            mean: Vector2::new(self.mean[i], self.mean[i + 1]),
            cov: self.cov.fixed_view::<2, 2>(i, i).into_owned(),
        }
    }

    fn predict(&mut self, u: &M::Control) -> Result<()> {
        let n = self.model.pose_dim();
        let dim = self.mean.len();
        let pose = self.estimate();
        let f = self.model.predict_jacobian(&pose, u)?;
        let q = self.model.process_cov(&pose, u)?;
        let next = self.model.predict(&pose, u)?;
        self.mean.rows_mut(0, n).copy_from(&next);
        let pxx = &f * self.cov.view((0, 0), (n, n)) * f.transpose() + q;
        self.cov.view_mut((0, 0), (n, n)).copy_from(&pxx);
        if dim > n {
            let pxm = &f * self.cov.view((0, n), (n, dim - n));
            self.cov.view_mut((0, n), (n, dim - n)).copy_from(&pxm);
            self.cov.view_mut((n, 0), (dim - n, n)).copy_from(&pxm.transpose());
        }
        Ok(())
    }

    /// Measurement Jacobian of feature `k` over the whole state.
    fn observation_jacobian(&self, k: usize) -> Result<(Vector2<f64>, DMatrix<f64>)> {
        let n = self.model.pose_dim();
        let pose = self.estimate();
        let feat = self.feature(k);
        let h = self.model.observe(&pose, &feat.mean)?;
        let der = self.model.observe_derivatives(&pose, &feat.mean)?;
        let mut big = DMatrix::zeros(2, self.mean.len());
        big.view_mut((0, 0), (2, n)).copy_from(&der.jacobian.columns(0, n));
        big.view_mut((0, n + 2 * k), (2, 2)).copy_from(&der.jacobian.columns(n, 2));
        Ok((h, big))
    }

    fn innovation(&self, k: usize, z: &Vector2<f64>) -> Result<(Vector2<f64>, Matrix2<f64>, DMatrix<f64>)> {
        let (h, big) = self.observation_jacobian(k)?;
        let nu = -self.model.observation_residual(&h, z);
        let s = &big * &self.cov * big.transpose();
        let s = Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)]) + self.model.sensor_cov();
        Ok((nu, s, big))
    }

    fn repair(&mut self) {
        self.cov = symmetrize(&self.cov);
        if cholesky(&self.cov).is_ok() {
            return;
        }
        self.repairs += 1;
        let dim = self.cov.nrows();
        let scale = self.cov.diagonal().amax().max(1e-12);
        let mut jitter = 1e-12 * scale;
        while cholesky(&self.cov).is_err() && jitter < scale {
            self.cov += DMatrix::identity(dim, dim) * jitter;
            jitter *= 10.0;
        }
    }

    pub fn step(&mut self, u: &M::Control, obs: Option<&Observation>) -> Result<()> {
        self.predict(u)?;
        let Some(obs) = obs else {
            return Ok(());
        };
        let n = self.model.pose_dim();
        let known = match (self.association, obs.id) {
            (AssociationMode::Known, Some(id)) => self.ids.iter().position(|&i| i == id),
            _ => {
                let mut best: Option<(usize, f64)> = None;
                for k in 0..self.ids.len() {
                    if let Ok((nu, s, _)) = self.innovation(k, &obs.z) {
                        let d2 = mahalanobis(&nu, &s);
                        if best.is_none_or(|(_, b)| d2 < b) {
                            best = Some((k, d2));
                        }
                    }
                }
                best.filter(|&(_, d2)| d2 <= self.gate).map(|(k, _)| k)
            }
        };
        match known {
            Some(k) => {
                let (nu, s, big) = self.innovation(k, &obs.z)?;
                let s_inv = s.try_inverse().ok_or(Error::NotPositiveDefinite { pivot: 0, value: s.determinant() })?;
                let s_inv = DMatrix::from_column_slice(2, 2, s_inv.as_slice());
                let pht = &self.cov * big.transpose();
                let gain = &pht * s_inv;
                self.mean += &gain * DVector::from_column_slice(nu.as_slice());
                let dim = self.mean.len();
                let a = DMatrix::identity(dim, dim) - &gain * &big;
                let r = DMatrix::from_column_slice(2, 2, self.model.sensor_cov().as_slice());
                self.cov = &a * &self.cov * a.transpose() + &gain * r * gain.transpose();
            }
            None => {
                let pose = self.estimate();
                let inv = self.model.invert_observation(&pose, &obs.z)?;
                let dim = self.mean.len();
                let gx = &inv.d_pose;
                let gz = DMatrix::from_column_slice(2, 2, inv.d_z.as_slice());
                let r = DMatrix::from_column_slice(2, 2, self.model.sensor_cov().as_slice());
                let cross = gx * self.cov.view((0, 0), (n, dim));
                let pmm = cross.columns(0, n) * gx.transpose() + &gz * r * gz.transpose();
                let mut cov = DMatrix::zeros(dim + 2, dim + 2);
                cov.view_mut((0, 0), (dim, dim)).copy_from(&self.cov);
                cov.view_mut((dim, 0), (2, dim)).copy_from(&cross);
                cov.view_mut((0, dim), (dim, 2)).copy_from(&cross.transpose());
                cov.view_mut((dim, dim), (2, 2)).copy_from(&pmm);
                self.cov = cov;
                self.mean = self.mean.clone().insert_rows(dim, 2, 0.0);
                self.mean[dim] = inv.landmark[0];
                self.mean[dim + 1] = inv.landmark[1];
                let id = match (self.association, obs.id) {
                    (AssociationMode::Known, Some(id)) => id,
                    _ => self.ids.len() as u32,
                };
                self.ids.push(id);
            }
        }
        let pose = self.model.normalize_pose(self.estimate());
        self.mean.rows_mut(0, n).copy_from(&pose);
        self.repair();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::LinearSurrogate;
    use crate::vehicle::VehicleModel;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn scan_visibility() {
        let p = VehicleParams::default();
        let pose = VehiclePose::new(0.0, 0.0, 0.0);
        let mut r = rng::stream(1, &[0]);
        let far = [(0, Vector2::new(20.0, 0.0))];
        assert!(synthetic_scan(&pose, &far, &p, &mut r).unwrap().is_none());
        let behind = [(0, Vector2::new(-5.0, 0.0))];
        assert!(synthetic_scan(&pose, &behind, &p, &mut r).unwrap().is_none());
        let ahead = [(3, Vector2::new(5.0, 1.0))];
        let (z, id) = synthetic_scan(&pose, &ahead, &p, &mut r).unwrap().unwrap();
        assert_eq!(id, 3);
        assert!((z.range - 26f64.sqrt()).abs() < 0.5);
    }

    #[test]
    fn association_examples() {
        let model = VehicleModel::default();
        let pose = DVector::from_vec(vec![0.0, 0.0, FRAC_PI_2]);
        let z = Vector2::new(5.0, 0.1);
        assert_eq!(associate(&model, &pose, None, &[], &z, DEFAULT_GATE), Association::New { d2: f64::INFINITY });
        let f = init_feature(&model, &pose, &z, 0).unwrap();
        let other = FeatureEstimate { id: 1, mean: Vector2::new(-5.0, 3.0), cov: f.cov };
        match associate(&model, &pose, None, &[other, f], &z, DEFAULT_GATE) {
            Association::Known { index, d2 } => {
                assert_eq!(index, 1);
                assert!(d2 < 1e-12);
            }
            a => panic!("unexpected {a:?}"),
        }
    }

    #[test]
    fn ekf_without_observation_only_predicts() {
        let model = LinearSurrogate::default();
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let mut ekf = EkfSlam::new(&model, &x0, &(DMatrix::identity(2, 2) * 0.1), DEFAULT_GATE, AssociationMode::Known);
        ekf.step(&Vector2::new(1.0, 0.0), None).unwrap();
        assert_eq!(ekf.estimate(), DVector::from_vec(vec![2.0, 1.0]));
        assert!((ekf.covariance()[(0, 0)] - 0.14).abs() < 1e-15);
    }
}
