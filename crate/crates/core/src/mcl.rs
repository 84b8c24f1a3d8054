//! Monte Carlo localisation on a known landmark map.
//!
//! Two proposals are available. The standard filter moves particles with the
//! motion model and weights them by the measurement likelihood. The implicit
//! filter minimises the per-particle step objective (motion prior times
//! likelihood) and draws the new pose by implicit sampling, so samples land
//! where the data say the vehicle is.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{
    deferred_predict, measurement_log_likelihood, needs_finite_differences, sample_pose, StateSpaceModel, StepObjective,
};
use crate::numerics::{cholesky, NewtonOptions};
use crate::rng::{self, tag};
use crate::sampler::{
    effective_sample_size, normalize_log_weights, prepare, resample_systematic, sample_with, standard_normal_vector,
    JacobianForm, MapKind,
};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkMap {
    landmarks: BTreeMap<u32, Vector2<f64>>,
}

impl LandmarkMap {
    pub fn new(landmarks: impl IntoIterator<Item = (u32, Vector2<f64>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, m) in landmarks {
            if map.insert(id, m).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate landmark id {id}")));
            }
        }
        Ok(Self { landmarks: map })
    }

    pub fn get(&self, id: u32) -> Result<Vector2<f64>> {
        self.landmarks.get(&id).copied().ok_or(Error::UnknownLandmark(id))
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Vector2<f64>)> + '_ {
        self.landmarks.iter().map(|(&id, &m)| (id, m))
    }
}

/// A measurement of a landmark with known identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub id: u32,
    pub z: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    /// Pose, or its noise-free prediction while noise is deferred.
    pub pose: DVector<f64>,
    /// Process noise covariance accumulated since the last measurement when
    /// noise is deferred.
    pub pending_cov: Option<DMatrix<f64>>,
    /// Normalised log weight.
    pub log_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    Implicit,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MclConfig {
    pub particles: usize,
    pub proposal: Proposal,
    pub map: MapKind,
    pub jacobian: JacobianForm,
    /// Resample when the effective sample size drops below this fraction of
    /// the particle count.
    pub resample_fraction: f64,
    pub seed: u64,
    pub newton: NewtonOptions,
    /// Implicit proposal only: between measurements, move particles along the
    /// noise-free prediction and accumulate the process noise covariance, so
    /// that the next measurement update samples the noise of the whole
    /// interval. Otherwise particles sample the motion model at every step and
    /// the update only reaches the last step's noise.
    pub defer_noise: bool,
}

impl Default for MclConfig {
    fn default() -> Self {
        Self {
            particles: 100,
            proposal: Proposal::Implicit,
            map: MapKind::Quadratic,
            jacobian: JacobianForm::FiniteDifference,
            resample_fraction: 0.5,
            seed: 0,
            newton: NewtonOptions::default(),
            defer_noise: true,
        }
    }
}

/// Draws the initial ensemble around `pose` (all particles at `pose` when
/// `cov` is `None`).
pub fn initial_poses<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    cov: Option<&DMatrix<f64>>,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let chol = cov.map(cholesky).transpose()?;
    Ok((0..count)
        .map(|j| match &chol {
            Some(c) => {
                let mut r = rng::stream(seed, &[tag::INIT, j as u64]);
                model.normalize_pose(pose + c.l() * standard_normal_vector(pose.len(), &mut r))
            }
            None => pose.clone(),
        })
        .collect())
}

/// Normalises the log weights of an ensemble in place and returns the
/// effective sample size.
pub(crate) fn renormalize(log_weights: &mut [f64]) -> Result<f64> {
    let w = normalize_log_weights(log_weights)?;
    for (lw, wi) in log_weights.iter_mut().zip(&w) {
        *lw = wi.ln();
    }
    Ok(effective_sample_size(&w))
}

/// Resampling indices when the effective sample size is below the threshold.
pub(crate) fn maybe_resample(log_weights: &[f64], fraction: f64, seed: u64, step: u64) -> Option<Vec<usize>> {
    let w: Vec<f64> = log_weights.iter().map(|lw| lw.exp()).collect();
    let m = w.len();
    if effective_sample_size(&w) >= fraction * m as f64 {
        return None;
    }
    let mut r = rng::stream(seed, &[tag::RESAMPLE, step]);
    Some(resample_systematic(&w, &mut r))
}

struct Moved {
    pose: DVector<f64>,
    pending_cov: Option<DMatrix<f64>>,
    increment: f64,
    fell_back: bool,
}

pub struct MclFilter<'a, M: StateSpaceModel> {
    model: &'a M,
    map: &'a LandmarkMap,
    config: MclConfig,
    particles: Vec<Particle>,
    step: u64,
    finite_differences: bool,
    /// Particles that fell back to the bootstrap proposal.
    pub fallbacks: usize,
    pub resamples: usize,
}

impl<'a, M: StateSpaceModel> MclFilter<'a, M> {
    pub fn new(
        model: &'a M,
        map: &'a LandmarkMap,
        config: MclConfig,
        pose: &DVector<f64>,
        initial_cov: Option<&DMatrix<f64>>,
        control: &M::Control,
    ) -> Result<Self> {
        if config.particles == 0 {
            return Err(Error::InvalidConfig("at least one particle is required".into()));
        }
        let finite_differences = match map.iter().next() {
            Some((_, m)) if config.proposal == Proposal::Implicit => needs_finite_differences(model, pose, control, &m)?,
            _ => false,
        };
        let lw = -(config.particles as f64).ln();
        let particles = initial_poses(model, pose, initial_cov, config.particles, config.seed)?
            .into_iter()
            .map(|pose| Particle { pose, pending_cov: None, log_weight: lw })
            .collect();
        Ok(Self {
            model,
            map,
            config,
            particles,
            step: 0,
            finite_differences,
            fallbacks: 0,
            resamples: 0,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn uses_finite_differences(&self) -> bool {
        self.finite_differences
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        effective_sample_size(&self.weights())
    }

    /// Weighted mean pose.
    pub fn estimate(&self) -> DVector<f64> {
        let poses: Vec<DVector<f64>> = self.particles.iter().map(|p| p.pose.clone()).collect();
        self.model.mean_pose(&poses, &self.weights())
    }

    /// Advances the ensemble by one control and assimilates the measurements
    /// taken at the new time (if any).
    pub fn step(&mut self, u: &M::Control, measurements: &[Measurement]) -> Result<()> {
        self.step += 1;
        let landmarks: Vec<(Vector2<f64>, Vector2<f64>)> = measurements
            .iter()
            .map(|m| Ok((self.map.get(m.id)?, m.z)))
            .collect::<Result<_>>()?;
        let step = self.step;
        let seed = self.config.seed;
        let model = self.model;
        let config = &self.config;
        let fd = self.finite_differences;
        let defer = config.defer_noise && config.proposal == Proposal::Implicit;

        let likelihood = |pose: &DVector<f64>| -> Result<f64> {
            landmarks.iter().map(|(m, z)| measurement_log_likelihood(model, pose, m, z)).sum()
        };
        // Prior of the new pose: mean and covariance.
        let prior = |p: &Particle| -> Result<(DVector<f64>, DMatrix<f64>)> {
            let pending = if defer { p.pending_cov.as_ref() } else { None };
            deferred_predict(model, &p.pose, pending, u)
        };
        let implicit = |mean: DVector<f64>, cov: &DMatrix<f64>, r: &mut rng::StreamRng| -> Result<(DVector<f64>, f64)> {
            let mut obj = StepObjective::new(model, mean, cov)?.with_finite_differences(fd);
            for (m, z) in &landmarks {
                obj = obj.with_measurement(*m, *z);
            }
            let prep = prepare(&obj, &obj.initial_guess(), &config.newton)?;
            let xi = standard_normal_vector(prep.dim(), r);
            let s = sample_with(&obj, &prep, &xi, config.map, config.jacobian)?;
            let inc = obj.log_marginal(&prep, &s);
            if !inc.is_finite() {
                return Err(Error::DegenerateWeights);
            }
            Ok((model.normalize_pose(s.x), inc))
        };

        let moved: Vec<Result<Moved>> = self
            .particles
            .par_iter()
            .enumerate()
            .map(|(j, p)| {
                let mut r = rng::stream(seed, &[tag::PARTICLE, step, j as u64]);
                let (mean, cov) = prior(p)?;
                if landmarks.is_empty() && defer {
                    return Ok(Moved { pose: mean, pending_cov: Some(cov), increment: 0.0, fell_back: false });
                }
                if !landmarks.is_empty() && config.proposal == Proposal::Implicit {
                    if let Ok((pose, increment)) = implicit(mean.clone(), &cov, &mut r) {
                        return Ok(Moved { pose, pending_cov: None, increment, fell_back: false });
                    }
                    r = rng::stream(seed, &[tag::PARTICLE, step, j as u64, 1]);
                    let pose = sample_pose(model, &mean, &cov, &mut r)?;
                    let increment = likelihood(&pose)?;
                    return Ok(Moved { pose, pending_cov: None, increment, fell_back: true });
                }
                let pose = sample_pose(model, &mean, &cov, &mut r)?;
                let increment = likelihood(&pose)?;
                Ok(Moved { pose, pending_cov: None, increment, fell_back: false })
            })
            .collect();
        let mut log_weights = Vec::with_capacity(moved.len());
        for (p, m) in self.particles.iter_mut().zip(moved) {
            let m = m?;
            p.pose = m.pose;
            p.pending_cov = m.pending_cov;
            log_weights.push(p.log_weight + m.increment);
            self.fallbacks += usize::from(m.fell_back);
        }
        renormalize(&mut log_weights)?;
        for (p, lw) in self.particles.iter_mut().zip(&log_weights) {
            p.log_weight = *lw;
        }
        if let Some(idx) = maybe_resample(&log_weights, self.config.resample_fraction, seed, step) {
            let lw = -(idx.len() as f64).ln();
            self.particles = idx
                .into_iter()
                .map(|i| Particle { log_weight: lw, ..self.particles[i].clone() })
                .collect();
            self.resamples += 1;
        }
        Ok(())
    }
}

/// `|estimate - truth| / |truth|` over the stacked planar positions.
pub fn trajectory_error(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (e, t) in estimates.iter().zip(truth) {
        num += (e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2);
        den += t[0].powi(2) + t[1].powi(2);
    }
    (num / den).sqrt()
}
