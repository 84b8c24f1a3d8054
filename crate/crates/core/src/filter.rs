//! Shared pieces of the particle filters: the state-space model interface, the
//! per-step objective minimised by implicit sampling, and a linear-Gaussian
//! reference model for which the Kalman filter is exact.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, finite_diff_gradient, finite_diff_hessian, hessian_from_gradient, Objective, GRADIENT_STEP,
    HESSIAN_STEP,
};
use crate::sampler::{standard_normal_vector, ImplicitSample, Prepared};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// First and second derivatives of an observation `h(pose, landmark)`.
///
/// Variables are ordered as the pose followed by the two landmark coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationDerivatives {
    /// `2 x (n + 2)`.
    pub jacobian: DMatrix<f64>,
    /// Hessian of each observation component, `(n + 2) x (n + 2)`.
    pub hessians: [DMatrix<f64>; 2],
}

/// A landmark position recovered from a pose and an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseObservation {
    pub landmark: Vector2<f64>,
    /// `d landmark / d pose`, `2 x n`.
    pub d_pose: DMatrix<f64>,
    /// `d landmark / d z`.
    pub d_z: Matrix2<f64>,
}

/// Discrete-time motion model with additive Gaussian process noise, observed
/// through two-component measurements of point landmarks.
pub trait StateSpaceModel: Sync {
    type Control: Copy + Send + Sync + std::fmt::Debug;

    fn pose_dim(&self) -> usize;

    /// Noise-free one-step prediction.
    fn predict(&self, pose: &DVector<f64>, u: &Self::Control) -> Result<DVector<f64>>;

    /// `d predict / d pose`.
    fn predict_jacobian(&self, pose: &DVector<f64>, u: &Self::Control) -> Result<DMatrix<f64>>;

    /// Covariance of the process noise added to the prediction.
    fn process_cov(&self, pose: &DVector<f64>, u: &Self::Control) -> Result<DMatrix<f64>>;

    /// `a - b`, with angular components wrapped.
    fn pose_difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        a - b
    }

    fn normalize_pose(&self, pose: DVector<f64>) -> DVector<f64> {
        pose
    }

    fn observe(&self, pose: &DVector<f64>, landmark: &Vector2<f64>) -> Result<Vector2<f64>>;

    /// `predicted - z`, with angular components wrapped.
    fn observation_residual(&self, predicted: &Vector2<f64>, z: &Vector2<f64>) -> Vector2<f64> {
        predicted - z
    }

    fn observe_derivatives(&self, pose: &DVector<f64>, landmark: &Vector2<f64>) -> Result<ObservationDerivatives>;

    fn sensor_cov(&self) -> Matrix2<f64>;

    fn invert_observation(&self, pose: &DVector<f64>, z: &Vector2<f64>) -> Result<InverseObservation>;

    /// Weighted mean of poses; `weights` sum to one.
    fn mean_pose(&self, poses: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
        poses
            .iter()
            .zip(weights)
            .fold(DVector::zeros(self.pose_dim()), |acc, (p, w)| acc + p * *w)
    }
}

/// Draws from the motion model: `predict(pose, u) + N(0, process_cov)`.
pub fn sample_motion<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    u: &M::Control,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let mean = model.predict(pose, u)?;
    let chol = cholesky(&model.process_cov(pose, u)?)?;
    let xi = standard_normal_vector(mean.len(), rng);
    Ok(model.normalize_pose(mean + chol.l() * xi))
}

/// Prediction with deferred process noise: the noise-free mean and the
/// linearised covariance accumulated since the last measurement
/// (`J P J^T + process_cov`, with `P` zero when `None`).
pub fn deferred_predict<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    cov: Option<&DMatrix<f64>>,
    u: &M::Control,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mean = model.predict(pose, u)?;
    let mut next = model.process_cov(pose, u)?;
    if let Some(p) = cov {
        let j = model.predict_jacobian(pose, u)?;
        next += &j * p * j.transpose();
    }
    Ok((mean, crate::numerics::symmetrize(&next)))
}

/// Draws `N(mean, cov)` and normalises the result.
pub fn sample_pose<M: StateSpaceModel + ?Sized>(
    model: &M,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let chol = cholesky(cov)?;
    let xi = standard_normal_vector(mean.len(), rng);
    Ok(model.normalize_pose(mean + chol.l() * xi))
}

/// Log density of a residual under `N(0, cov)`.
pub fn gaussian_log_density(residual: &Vector2<f64>, cov: &Matrix2<f64>) -> Result<f64> {
    let inv = cov.try_inverse().ok_or(Error::NotPositiveDefinite { pivot: 0, value: cov.determinant() })?;
    let det = cov.determinant();
    if det <= 0.0 {
        return Err(Error::NotPositiveDefinite { pivot: 1, value: det });
    }
    Ok(-0.5 * residual.dot(&(inv * residual)) - LN_2PI - 0.5 * det.ln())
}

/// Log likelihood of `z` given the pose and the landmark position.
pub fn measurement_log_likelihood<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    landmark: &Vector2<f64>,
    z: &Vector2<f64>,
) -> Result<f64> {
    let h = model.observe(pose, landmark)?;
    gaussian_log_density(&model.observation_residual(&h, z), &model.sensor_cov())
}

fn inverse2(m: &Matrix2<f64>) -> Result<(Matrix2<f64>, f64)> {
    let det = m.determinant();
    match m.try_inverse() {
        Some(inv) if det > 0.0 => Ok((inv, det.ln())),
        _ => Err(Error::NotPositiveDefinite { pivot: 0, value: det }),
    }
}

#[derive(Debug, Clone)]
struct FreeLandmark {
    mean: Vector2<f64>,
    precision: Matrix2<f64>,
    log_det: f64,
    z: Vector2<f64>,
}

/// `-log` of the unnormalised posterior of one filter step:
///
/// ```text
/// F(x [, m]) = 1/2 |x - f|^2_{S1^-1} + sum_i 1/2 |h(x, m_i) - z_i|^2_{S2^-1}
///              [+ 1/2 |m - m_prior|^2_{Sm^-1}]
/// ```
///
/// where `f` is the predicted pose. Landmarks are either known (`m_i` fixed)
/// or, for at most one measurement, part of the variables with a Gaussian
/// prior. The variables are the pose followed by the free landmark.
#[derive(Debug, Clone)]
pub struct StepObjective<'a, M: StateSpaceModel + ?Sized> {
    model: &'a M,
    predicted: DVector<f64>,
    process_precision: DMatrix<f64>,
    process_log_det: f64,
    sensor_precision: Matrix2<f64>,
    sensor_log_det: f64,
    fixed: Vec<(Vector2<f64>, Vector2<f64>)>,
    free: Option<FreeLandmark>,
    finite_differences: bool,
}

impl<'a, M: StateSpaceModel + ?Sized> StepObjective<'a, M> {
    pub fn new(model: &'a M, predicted: DVector<f64>, process_cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky(process_cov)?;
        let (sensor_precision, sensor_log_det) = inverse2(&model.sensor_cov())?;
        Ok(Self {
            model,
            process_precision: chol.inverse(),
            process_log_det: 2.0 * chol.log_det_l(),
            predicted,
            sensor_precision,
            sensor_log_det,
            fixed: Vec::new(),
            free: None,
            finite_differences: false,
        })
    }

    /// Adds a measurement of a landmark at a known position.
    pub fn with_measurement(mut self, landmark: Vector2<f64>, z: Vector2<f64>) -> Self {
        self.fixed.push((landmark, z));
        self
    }

    /// Adds a measurement of a landmark whose position is a variable with
    /// prior `N(mean, cov)`.
    pub fn with_free_landmark(mut self, mean: Vector2<f64>, cov: &Matrix2<f64>, z: Vector2<f64>) -> Result<Self> {
        let (precision, log_det) = inverse2(cov)?;
        self.free = Some(FreeLandmark { mean, precision, log_det, z });
        Ok(self)
    }

    /// Replaces the analytic derivatives by central differences of the value.
    pub fn with_finite_differences(mut self, on: bool) -> Self {
        self.finite_differences = on;
        self
    }

    pub fn predicted(&self) -> &DVector<f64> {
        &self.predicted
    }

    /// Starting point for the minimisation: the prediction and the prior mean
    /// of the free landmark.
    pub fn initial_guess(&self) -> DVector<f64> {
        let n = self.predicted.len();
        let mut x = DVector::zeros(self.dim());
        x.rows_mut(0, n).copy_from(&self.predicted);
        if let Some(free) = &self.free {
            x.rows_mut(n, 2).copy_from(&free.mean);
        }
        x
    }

    fn pose_of(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.predicted.len()).into_owned()
    }

    fn landmark_of(&self, x: &DVector<f64>) -> Vector2<f64> {
        let n = self.predicted.len();
        Vector2::new(x[n], x[n + 1])
    }

    /// Log of the normalising constant of the Gaussian factors, plus
    /// `(m / 2) log 2 pi`, so that `log_evidence + log_normalizer` estimates
    /// the log marginal likelihood of the measurements.
    pub fn log_normalizer(&self) -> f64 {
        let n = self.predicted.len() as f64;
        let count = self.fixed.len() + usize::from(self.free.is_some());
        let mut c = -0.5 * n * LN_2PI - 0.5 * self.process_log_det;
        c -= count as f64 * (LN_2PI + 0.5 * self.sensor_log_det);
        if let Some(free) = &self.free {
            c -= LN_2PI + 0.5 * free.log_det;
        }
        c + 0.5 * self.dim() as f64 * LN_2PI
    }

    /// Log marginal likelihood estimate carried by one implicit sample.
    pub fn log_marginal(&self, prep: &Prepared, sample: &ImplicitSample) -> f64 {
        prep.log_evidence(sample) + self.log_normalizer()
    }

    fn analytic(&self, x: &DVector<f64>, want_hessian: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let n = self.predicted.len();
        let dim = self.dim();
        let pose = self.pose_of(x);
        let d = self.model.pose_difference(&pose, &self.predicted);
        let mut g = DVector::zeros(dim);
        g.rows_mut(0, n).copy_from(&(&self.process_precision * &d));
        let mut h = want_hessian.then(|| {
            let mut h = DMatrix::zeros(dim, dim);
            h.view_mut((0, 0), (n, n)).copy_from(&self.process_precision);
            h
        });
        let mut add = |landmark: &Vector2<f64>, z: &Vector2<f64>, free: bool| -> Result<()> {
            let pred = self.model.observe(&pose, landmark)?;
            let w = self.sensor_precision * self.model.observation_residual(&pred, z);
            let der = self.model.observe_derivatives(&pose, landmark)?;
            let cols = if free { n + 2 } else { n };
            let j = der.jacobian.columns(0, cols);
            let jw = j.transpose() * w;
            g.rows_mut(0, cols).zip_apply(&jw, |a, b| *a += b);
            if let Some(h) = h.as_mut() {
                let mut block = j.transpose() * self.sensor_precision * j;
                for k in 0..2 {
                    block += der.hessians[k].view((0, 0), (cols, cols)) * w[k];
                }
                let mut target = h.view_mut((0, 0), (cols, cols));
                target += block;
            }
            Ok(())
        };
        for (landmark, z) in &self.fixed {
            add(landmark, z, false)?;
        }
        if let Some(free) = &self.free {
            let m = self.landmark_of(x);
            add(&m, &free.z, true)?;
            let gm = free.precision * (m - free.mean);
            g[n] += gm[0];
            g[n + 1] += gm[1];
            if let Some(h) = h.as_mut() {
                let mut target = h.view_mut((n, n), (2, 2));
                target += free.precision;
            }
        }
        Ok((g, h))
    }
}

impl<M: StateSpaceModel + ?Sized> Objective for StepObjective<'_, M> {
    fn dim(&self) -> usize {
        self.predicted.len() + if self.free.is_some() { 2 } else { 0 }
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let pose = self.pose_of(x);
        let d = self.model.pose_difference(&pose, &self.predicted);
        let mut v = 0.5 * d.dot(&(&self.process_precision * &d));
        let term = |landmark: &Vector2<f64>, z: &Vector2<f64>| match self.model.observe(&pose, landmark) {
            Ok(pred) => {
                let r = self.model.observation_residual(&pred, z);
                0.5 * r.dot(&(self.sensor_precision * r))
            }
            Err(_) => f64::INFINITY,
        };
        for (landmark, z) in &self.fixed {
            v += term(landmark, z);
        }
        if let Some(free) = &self.free {
            let m = self.landmark_of(x);
            v += term(&m, &free.z);
            let dm = m - free.mean;
            v += 0.5 * dm.dot(&(free.precision * dm));
        }
        v
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.finite_differences {
            return finite_diff_gradient(|y| self.value(y), x, GRADIENT_STEP);
        }
        match self.analytic(x, false) {
            Ok((g, _)) => g,
            Err(_) => DVector::from_element(self.dim(), f64::NAN),
        }
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if self.finite_differences {
            return finite_diff_hessian(|y| self.value(y), x, HESSIAN_STEP);
        }
        match self.analytic(x, true) {
            Ok((_, Some(h))) => h,
            _ => DMatrix::from_element(self.dim(), self.dim(), f64::NAN),
        }
    }
}

/// Relative disagreement between the analytic and the finite-difference
/// derivatives of an objective at `x`: `(gradient, hessian)`, each as
/// `max |a - fd| / max(max |fd|, 1)`.
pub fn derivative_mismatch<O: Objective + ?Sized>(f: &O, x: &DVector<f64>) -> (f64, f64) {
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let scale = b.amax().max(1.0);
        (a - b).amax() / scale
    };
    let g = f.gradient(x);
    let g_fd = finite_diff_gradient(|y| f.value(y), x, GRADIENT_STEP);
    let h = f.hessian(x);
    let h_fd = hessian_from_gradient(|y| f.gradient(y), x, GRADIENT_STEP);
    let as_col = |v: DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    (rel(&as_col(g), &as_col(g_fd)), rel(&h, &h_fd))
}

/// Tolerance above which analytic step derivatives are replaced by finite
/// differences.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-3;

/// Checks the analytic derivatives of the step objective built from a model
/// at one configuration. Returns `true` when finite differences should be used
/// instead.
pub fn needs_finite_differences<M: StateSpaceModel + ?Sized>(
    model: &M,
    pose: &DVector<f64>,
    u: &M::Control,
    landmark: &Vector2<f64>,
) -> Result<bool> {
    let predicted = model.predict(pose, u)?;
    let cov = model.process_cov(pose, u)?;
    let z = model.observe(&predicted, landmark)?;
    // Perturb so that residuals and second-order terms are not zero.
    let offset = DVector::from_fn(predicted.len(), |i, _| 0.05 * (i as f64 + 1.0));
    let obj = StepObjective::new(model, predicted.clone(), &cov)?
        .with_measurement(*landmark, z)
        .with_free_landmark(landmark + Vector2::new(0.1, -0.1), &(Matrix2::identity() * 0.25), z)?;
    let mut x = obj.initial_guess();
    let n = predicted.len();
    x.rows_mut(0, n).zip_apply(&offset, |a, b| *a += b);
    let (g, h) = derivative_mismatch(&obj, &x);
    Ok(g > DERIVATIVE_TOLERANCE || h > DERIVATIVE_TOLERANCE)
}

/// Linear-Gaussian model on a planar position:
/// `x' = x + u + N(0, Q)`, `z = m - x + N(0, R)`.
///
/// Every filter is exact or asymptotically exact on it, so it serves as a
/// reference for the Kalman filter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub process_cov: Matrix2<f64>,
    pub sensor_cov: Matrix2<f64>,
}

impl Default for LinearSurrogate {
    fn default() -> Self {
        Self {
            process_cov: Matrix2::from_diagonal(&Vector2::new(0.04, 0.09)),
            sensor_cov: Matrix2::from_diagonal(&Vector2::new(0.01, 0.02)),
        }
    }
}

fn to_d(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 2, m.as_slice())
}

impl StateSpaceModel for LinearSurrogate {
    type Control = Vector2<f64>;

    fn pose_dim(&self) -> usize {
        2
    }

    fn predict(&self, pose: &DVector<f64>, u: &Vector2<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(vec![pose[0] + u[0], pose[1] + u[1]]))
    }

    fn predict_jacobian(&self, _pose: &DVector<f64>, _u: &Vector2<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(2, 2))
    }

    fn process_cov(&self, _pose: &DVector<f64>, _u: &Vector2<f64>) -> Result<DMatrix<f64>> {
        Ok(to_d(&self.process_cov))
    }

    fn observe(&self, pose: &DVector<f64>, landmark: &Vector2<f64>) -> Result<Vector2<f64>> {
        Ok(Vector2::new(landmark[0] - pose[0], landmark[1] - pose[1]))
    }

    fn observe_derivatives(&self, _pose: &DVector<f64>, _landmark: &Vector2<f64>) -> Result<ObservationDerivatives> {
        let mut jacobian = DMatrix::zeros(2, 4);
        jacobian.view_mut((0, 0), (2, 2)).fill_with_identity();
        jacobian.view_mut((0, 0), (2, 2)).neg_mut();
        jacobian.view_mut((0, 2), (2, 2)).fill_with_identity();
        Ok(ObservationDerivatives {
            jacobian,
            hessians: [DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)],
        })
    }

    fn sensor_cov(&self) -> Matrix2<f64> {
        self.sensor_cov
    }

    fn invert_observation(&self, pose: &DVector<f64>, z: &Vector2<f64>) -> Result<InverseObservation> {
        Ok(InverseObservation {
            landmark: Vector2::new(pose[0] + z[0], pose[1] + z[1]),
            d_pose: DMatrix::identity(2, 2),
            d_z: Matrix2::identity(),
        })
    }
}

/// Kalman filter on the linear surrogate with known landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanLocalizer {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl KalmanLocalizer {
    pub fn predict(&mut self, model: &LinearSurrogate, u: &Vector2<f64>) {
        self.mean += u;
        self.cov += model.process_cov;
    }

    pub fn update(&mut self, model: &LinearSurrogate, landmark: &Vector2<f64>, z: &Vector2<f64>) {
        // z = m - x, so H = -I.
        let s = self.cov + model.sensor_cov;
        let k = -self.cov * s.try_inverse().expect("innovation covariance is SPD");
        let innovation = z - (landmark - self.mean);
        self.mean += k * innovation;
        self.cov = (Matrix2::identity() + k) * self.cov;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::newton_minimize;
    use crate::sampler::{prepare, sample_quadratic_map};

    #[test]
    fn surrogate_step_objective_matches_kalman_update() {
        let model = LinearSurrogate::default();
        let prior_mean = Vector2::new(1.0, -2.0);
        let landmark = Vector2::new(4.0, 1.0);
        let z = Vector2::new(3.3, 2.6);
        let q = to_d(&model.process_cov);
        let obj = StepObjective::new(&model, DVector::from_column_slice(prior_mean.as_slice()), &q)
            .unwrap()
            .with_measurement(landmark, z);
        let prep = prepare(&obj, &obj.initial_guess(), &Default::default()).unwrap();
        let mut kf = KalmanLocalizer { mean: prior_mean, cov: model.process_cov };
        kf.update(&model, &landmark, &z);
        assert!((prep.mu[0] - kf.mean[0]).abs() < 1e-10);
        assert!((prep.mu[1] - kf.mean[1]).abs() < 1e-10);
        let cov = prep.chol.inverse();
        assert!((cov[(0, 0)] - kf.cov[(0, 0)]).abs() < 1e-12);
        assert!((cov[(1, 1)] - kf.cov[(1, 1)]).abs() < 1e-12);

        // The marginal likelihood of a linear-Gaussian step is N(z; m - f, Q + R).
        let sample = sample_quadratic_map(&obj, &prep, &DVector::from_vec(vec![0.3, -0.2])).unwrap();
        let expected = gaussian_log_density(&(z - (landmark - prior_mean)), &(model.process_cov + model.sensor_cov))
            .unwrap();
        assert!((obj.log_marginal(&prep, &sample) - expected).abs() < 1e-10);
    }

    #[test]
    fn free_landmark_evidence_matches_joint_gaussian() {
        let model = LinearSurrogate::default();
        let f = DVector::from_vec(vec![0.5, 0.2]);
        let q = to_d(&model.process_cov);
        let m_mean = Vector2::new(3.0, 3.0);
        let m_cov = Matrix2::new(0.3, 0.05, 0.05, 0.2);
        let z = Vector2::new(2.0, 3.1);
        let obj = StepObjective::new(&model, f.clone(), &q).unwrap().with_free_landmark(m_mean, &m_cov, z).unwrap();
        let r = newton_minimize(&obj, &obj.initial_guess(), &Default::default());
        assert!(r.converged);
        let prep = prepare(&obj, &r.x, &Default::default()).unwrap();
        let sample = sample_quadratic_map(&obj, &prep, &DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4])).unwrap();
        let predicted_z = m_mean - Vector2::new(f[0], f[1]);
        let s = m_cov + model.process_cov + model.sensor_cov;
        let expected = gaussian_log_density(&(z - predicted_z), &s).unwrap();
        assert!((obj.log_marginal(&prep, &sample) - expected).abs() < 1e-10);
    }
}
