//! Car-like vehicle with a laser range-bearing sensor.
//!
//! The state is the laser position and the heading `(x, y, beta)`. The vehicle
//! is driven by the rear-left wheel speed `v_l` and the steering angle
//! `alpha`; the speed is translated to the rear axle before entering the
//! kinematics.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{InverseObservation, ObservationDerivatives, StateSpaceModel, StepObjective};
use crate::numerics::{cholesky, Objective};
use crate::sampler::standard_normal_vector;

/// Jitter added to the process noise covariance so it always factors.
pub const PROCESS_JITTER: f64 = 1e-12;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        a
    } else {
        PI - (PI - a).rem_euclid(2.0 * PI)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Wheel base.
    pub wheel_base: f64,
    /// Track width.
    pub width: f64,
    /// Lateral offset of the laser.
    pub laser_offset: f64,
    /// Distance from the rear axle to the laser.
    pub laser_distance: f64,
    /// Time step.
    pub dt: f64,
    /// Diagonal of the model noise matrix `Q` (acting on `x, y, beta`).
    pub model_noise: [f64; 3],
    /// Diagonal of the control noise matrix `P` (acting on `v_c, alpha`).
    pub control_noise: [f64; 2],
    /// Standard deviation of the range measurement.
    pub range_std: f64,
    /// Standard deviation of the bearing measurement.
    pub bearing_std: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheel_base: 2.83,
            width: 0.76,
            laser_offset: 0.5,
            laser_distance: 3.78,
            dt: 0.025,
            model_noise: [0.1, 0.1, 0.1 * PI / 180.0],
            control_noise: [0.5, 0.5],
            range_std: 0.05,
            bearing_std: 0.05 * PI / 180.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.wheel_base, self.width, self.laser_offset, self.laser_distance, self.dt]
            .iter()
            .chain(&self.model_noise)
            .chain(&self.control_noise)
            .all(|v| v.is_finite());
        let ok = finite
            && self.wheel_base > 0.0
            && self.dt > 0.0
            && self.model_noise.iter().all(|&q| q >= 0.0)
            && self.control_noise.iter().all(|&p| p >= 0.0)
            && self.range_std > 0.0
            && self.bearing_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid vehicle parameters: {self:?}")))
        }
    }

    pub fn sensor_cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.range_std.powi(2), 0.0, 0.0, self.bearing_std.powi(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehiclePose {
    pub x: f64,
    pub y: f64,
    pub beta: f64,
}

impl VehiclePose {
    /// Builds a pose with the heading wrapped to `(-pi, pi]`.
    pub fn new(x: f64, y: f64, beta: f64) -> Self {
        Self { x, y, beta: wrap_angle(beta) }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.x, self.y, self.beta])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Measured controls: rear-left wheel speed and steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub v_l: f64,
    pub alpha: f64,
}

/// Controls of the kinematics: axle speed and steering angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxleControl {
    pub v_c: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBearing {
    pub range: f64,
    pub bearing: f64,
}

impl RangeBearing {
    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.range, self.bearing)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self { range: v[0], bearing: v[1] }
    }
}

/// Translates the wheel speed to the rear axle.
pub fn axle_speed(v_l: f64, alpha: f64, params: &VehicleParams) -> Result<f64> {
    let denom = params.wheel_base - alpha.tan() * params.width;
    if !(denom > 0.0) || alpha.abs() >= FRAC_PI_2 {
        return Err(Error::SteeringSingularity { alpha });
    }
    Ok(params.wheel_base * v_l / denom)
}

pub fn axle_control(u: &ControlInput, params: &VehicleParams) -> Result<AxleControl> {
    Ok(AxleControl { v_c: axle_speed(u.v_l, u.alpha, params)?, alpha: u.alpha })
}

/// Time derivative of `(x, y, beta)`.
pub fn motion_rhs(pose: &VehiclePose, u: &AxleControl, params: &VehicleParams) -> Vector3<f64> {
    let (s, c) = pose.beta.sin_cos();
    let t = u.alpha.tan();
    let (a, b) = (params.laser_distance, params.laser_offset);
    Vector3::new(
        u.v_c * (c - t * (a * s - b * c)),
        u.v_c * (s + t * (a * c - b * s)),
        u.v_c / params.wheel_base * t,
    )
}

/// `d motion_rhs / d (v_c, alpha)`.
pub fn motion_jacobian_u(pose: &VehiclePose, u: &AxleControl, params: &VehicleParams) -> Matrix3x2<f64> {
    let (s, c) = pose.beta.sin_cos();
    let t = u.alpha.tan();
    let sec2 = 1.0 + t * t;
    let (a, b) = (params.laser_distance, params.laser_offset);
    Matrix3x2::new(
        c - t * (a * s - b * c),
        -u.v_c * sec2 * (a * s - b * c),
        s + t * (a * c - b * s),
        u.v_c * sec2 * (a * c - b * s),
        t / params.wheel_base,
        u.v_c * sec2 / params.wheel_base,
    )
}

/// `d motion_rhs / d (x, y, beta)`.
pub fn motion_jacobian_x(pose: &VehiclePose, u: &AxleControl, params: &VehicleParams) -> Matrix3<f64> {
    let (s, c) = pose.beta.sin_cos();
    let t = u.alpha.tan();
    let (a, b) = (params.laser_distance, params.laser_offset);
    let mut j = Matrix3::zeros();
    j[(0, 2)] = u.v_c * (-s - t * (a * c + b * s));
    j[(1, 2)] = u.v_c * (c - t * (a * s + b * c));
    j
}

/// Covariance of the one-step process noise,
/// `dt (J P P^T J^T + Q Q^T) + jitter I` with `J = d motion_rhs / d u`.
pub fn process_noise_cov(pose: &VehiclePose, u: &AxleControl, params: &VehicleParams) -> Matrix3<f64> {
    let j = motion_jacobian_u(pose, u, params);
    let p = Matrix2::from_diagonal(&Vector2::from(params.control_noise));
    let q = Matrix3::from_diagonal(&Vector3::from(params.model_noise));
    let jp = j * p;
    (jp * jp.transpose() + q * q.transpose()) * params.dt + Matrix3::identity() * PROCESS_JITTER
}

/// One Euler-Maruyama step with the given noise increment.
pub fn propagate_with_noise(
    pose: &VehiclePose,
    u: &ControlInput,
    params: &VehicleParams,
    noise: &Vector3<f64>,
) -> Result<VehiclePose> {
    let uc = axle_control(u, params)?;
    let r = motion_rhs(pose, &uc, params);
    Ok(VehiclePose::new(
        pose.x + r[0] * params.dt + noise[0],
        pose.y + r[1] * params.dt + noise[1],
        pose.beta + r[2] * params.dt + noise[2],
    ))
}

/// One Euler-Maruyama step with noise `N(0, process_noise_cov)`.
pub fn propagate(pose: &VehiclePose, u: &ControlInput, params: &VehicleParams, rng: &mut impl Rng) -> Result<VehiclePose> {
    let uc = axle_control(u, params)?;
    let cov = process_noise_cov(pose, &uc, params);
    let chol = cholesky(&DMatrix::from_column_slice(3, 3, cov.as_slice()))?;
    let xi = standard_normal_vector(3, rng);
    let noise = chol.l() * xi;
    propagate_with_noise(pose, u, params, &Vector3::new(noise[0], noise[1], noise[2]))
}

/// Noise-free range and bearing of a landmark seen from the laser.
pub fn measure_exact(pose: &VehiclePose, landmark: &Vector2<f64>) -> Result<RangeBearing> {
    let (ex, ey) = (landmark[0] - pose.x, landmark[1] - pose.y);
    let range = ex.hypot(ey);
    if range == 0.0 {
        return Err(Error::CoincidentLandmark);
    }
    Ok(RangeBearing {
        range,
        bearing: wrap_angle(ey.atan2(ex) - pose.beta + FRAC_PI_2),
    })
}

/// Range and bearing with additive Gaussian sensor noise.
pub fn measure(pose: &VehiclePose, landmark: &Vector2<f64>, params: &VehicleParams, rng: &mut impl Rng) -> Result<RangeBearing> {
    let exact = measure_exact(pose, landmark)?;
    let xi = standard_normal_vector(2, rng);
    Ok(RangeBearing {
        range: exact.range + params.range_std * xi[0],
        bearing: wrap_angle(exact.bearing + params.bearing_std * xi[1]),
    })
}

/// Derivatives of `(range, bearing)` with respect to `(x, y, beta, m_x, m_y)`.
pub fn range_bearing_derivatives(pose: &VehiclePose, landmark: &Vector2<f64>) -> Result<ObservationDerivatives> {
    let (dx, dy) = (pose.x - landmark[0], pose.y - landmark[1]);
    let r2 = dx * dx + dy * dy;
    if r2 == 0.0 {
        return Err(Error::CoincidentLandmark);
    }
    let r = r2.sqrt();
    let r3 = r2 * r;
    let r4 = r2 * r2;
    let mut jacobian = DMatrix::zeros(2, 5);
    let pose_row = [[dx / r, dy / r, 0.0], [-dy / r2, dx / r2, -1.0]];
    for k in 0..2 {
        for i in 0..3 {
            jacobian[(k, i)] = pose_row[k][i];
        }
        jacobian[(k, 3)] = -pose_row[k][0];
        jacobian[(k, 4)] = -pose_row[k][1];
    }
    let range_xy = Matrix2::new(dy * dy, -dx * dy, -dx * dy, dx * dx) / r3;
    let bearing_xy = Matrix2::new(2.0 * dx * dy, dy * dy - dx * dx, dy * dy - dx * dx, -2.0 * dx * dy) / r4;
    let embed = |block: Matrix2<f64>| {
        let mut h = DMatrix::zeros(5, 5);
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            h[(i, j)] = block[(i, j)];
            h[(i + 3, j + 3)] = block[(i, j)];
            h[(i, j + 3)] = -block[(i, j)];
            h[(i + 3, j)] = -block[(i, j)];
        }
        h
    };
    Ok(ObservationDerivatives {
        jacobian,
        hessians: [embed(range_xy), embed(bearing_xy)],
    })
}

/// Gradient and Hessian of the localisation step objective
///
/// ```text
/// F(x) = 1/2 |x - f|^2_{S1^-1} + sum_i 1/2 |h(x, m_i) - z_i|^2_{S2^-1}
/// ```
///
/// at `pose`, for the predicted pose `f`, process covariance `S1` and
/// measurements `(landmark, z)`.
pub fn mcl_objective_derivatives(
    pose: &VehiclePose,
    predicted: &VehiclePose,
    process_cov: &Matrix3<f64>,
    measurements: &[(Vector2<f64>, RangeBearing)],
    params: &VehicleParams,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let model = VehicleModel::new(*params);
    let obj = mcl_objective(&model, predicted, process_cov, measurements)?;
    let x = DVector::from_vec(vec![pose.x, pose.y, pose.beta]);
    let g = obj.gradient(&x);
    let h = obj.hessian(&x);
    Ok((Vector3::new(g[0], g[1], g[2]), Matrix3::from_fn(|i, j| h[(i, j)])))
}

/// The localisation step objective itself, see [`mcl_objective_derivatives`].
pub fn mcl_objective<'a>(
    model: &'a VehicleModel,
    predicted: &VehiclePose,
    process_cov: &Matrix3<f64>,
    measurements: &[(Vector2<f64>, RangeBearing)],
) -> Result<StepObjective<'a, VehicleModel>> {
    let cov = DMatrix::from_column_slice(3, 3, process_cov.as_slice());
    let mut obj = StepObjective::new(model, predicted.to_vector(), &cov)?;
    for (m, z) in measurements {
        obj = obj.with_measurement(*m, z.to_vector());
    }
    Ok(obj)
}

/// The vehicle as a [`StateSpaceModel`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleModel {
    pub params: VehicleParams,
}

impl VehicleModel {
    pub fn new(params: VehicleParams) -> Self {
        Self { params }
    }
}

fn to_d3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

impl StateSpaceModel for VehicleModel {
    type Control = ControlInput;

    fn pose_dim(&self) -> usize {
        3
    }

    fn predict(&self, pose: &DVector<f64>, u: &ControlInput) -> Result<DVector<f64>> {
        let p = VehiclePose { x: pose[0], y: pose[1], beta: pose[2] };
        let uc = axle_control(u, &self.params)?;
        let r = motion_rhs(&p, &uc, &self.params);
        Ok(DVector::from_vec(vec![
            p.x + r[0] * self.params.dt,
            p.y + r[1] * self.params.dt,
            wrap_angle(p.beta + r[2] * self.params.dt),
        ]))
    }

    fn predict_jacobian(&self, pose: &DVector<f64>, u: &ControlInput) -> Result<DMatrix<f64>> {
        let p = VehiclePose { x: pose[0], y: pose[1], beta: pose[2] };
        let uc = axle_control(u, &self.params)?;
        Ok(to_d3(&(Matrix3::identity() + motion_jacobian_x(&p, &uc, &self.params) * self.params.dt)))
    }

    fn process_cov(&self, pose: &DVector<f64>, u: &ControlInput) -> Result<DMatrix<f64>> {
        let p = VehiclePose { x: pose[0], y: pose[1], beta: pose[2] };
        let uc = axle_control(u, &self.params)?;
        Ok(to_d3(&process_noise_cov(&p, &uc, &self.params)))
    }

    fn pose_difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![a[0] - b[0], a[1] - b[1], wrap_angle(a[2] - b[2])])
    }

    fn normalize_pose(&self, mut pose: DVector<f64>) -> DVector<f64> {
        pose[2] = wrap_angle(pose[2]);
        pose
    }

    fn observe(&self, pose: &DVector<f64>, landmark: &Vector2<f64>) -> Result<Vector2<f64>> {
        let p = VehiclePose { x: pose[0], y: pose[1], beta: pose[2] };
        Ok(measure_exact(&p, landmark)?.to_vector())
    }

    fn observation_residual(&self, predicted: &Vector2<f64>, z: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(predicted[0] - z[0], wrap_angle(predicted[1] - z[1]))
    }

    fn observe_derivatives(&self, pose: &DVector<f64>, landmark: &Vector2<f64>) -> Result<ObservationDerivatives> {
        range_bearing_derivatives(&VehiclePose { x: pose[0], y: pose[1], beta: pose[2] }, landmark)
    }

    fn sensor_cov(&self) -> Matrix2<f64> {
        self.params.sensor_cov()
    }

    fn invert_observation(&self, pose: &DVector<f64>, z: &Vector2<f64>) -> Result<InverseObservation> {
        let (r, psi) = (z[0], z[1] + pose[2] - FRAC_PI_2);
        if !(r > 0.0) {
            return Err(Error::CoincidentLandmark);
        }
        let (s, c) = psi.sin_cos();
        Ok(InverseObservation {
            landmark: Vector2::new(pose[0] + r * c, pose[1] + r * s),
            d_pose: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -r * s, 0.0, 1.0, r * c]),
            d_z: Matrix2::new(c, -r * s, s, r * c),
        })
    }

    /// Weighted mean of the position and circular mean of the heading.
    fn mean_pose(&self, poses: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
        let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
        for (p, &w) in poses.iter().zip(weights) {
            x += w * p[0];
            y += w * p[1];
            s += w * p[2].sin();
            c += w * p[2].cos();
        }
        DVector::from_vec(vec![x, y, wrap_angle(s.atan2(c))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_jacobian, GRADIENT_STEP};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn axle_speed_examples() {
        let p = VehicleParams::default();
        assert_eq!(axle_speed(1.0, 0.0, &p).unwrap(), 1.0);
        assert_relative_eq!(axle_speed(1.0, PI / 4.0, &p).unwrap(), 2.83 / (2.83 - 0.76), epsilon = 1e-12);
        let singular = (p.wheel_base / p.width).atan();
        assert!(matches!(axle_speed(1.0, singular, &p), Err(Error::SteeringSingularity { .. })));
    }

    #[test]
    fn straight_driving() {
        let p = VehicleParams::default();
        let u = AxleControl { v_c: 1.0, alpha: 0.0 };
        let r = motion_rhs(&VehiclePose::new(0.0, 0.0, 0.0), &u, &p);
        assert_relative_eq!(r, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        let r = motion_rhs(&VehiclePose::new(0.0, 0.0, FRAC_PI_2), &u, &p);
        assert_relative_eq!(r, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        let next = propagate_with_noise(
            &VehiclePose::new(2.0, 3.0, 0.0),
            &ControlInput { v_l: 1.0, alpha: 0.0 },
            &p,
            &Vector3::zeros(),
        )
        .unwrap();
        assert_relative_eq!(next.x, 2.0 + p.dt, epsilon = 1e-15);
        assert_eq!((next.y, next.beta), (3.0, 0.0));
    }

    #[test]
    fn process_noise_without_control_noise() {
        let p = VehicleParams { control_noise: [0.0, 0.0], ..VehicleParams::default() };
        let cov = process_noise_cov(&VehiclePose::new(1.0, 2.0, 0.7), &AxleControl { v_c: 3.0, alpha: 0.2 }, &p);
        let q = Matrix3::from_diagonal(&Vector3::from(p.model_noise));
        assert_relative_eq!(cov, q * q * p.dt + Matrix3::identity() * PROCESS_JITTER, epsilon = 1e-18);
    }

    #[test]
    fn control_jacobian_matches_differences() {
        let p = VehicleParams::default();
        let pose = VehiclePose::new(1.0, -2.0, 0.3);
        let u = AxleControl { v_c: 2.0, alpha: 0.1 };
        let fd = finite_diff_jacobian(
            |w| {
                let r = motion_rhs(&pose, &AxleControl { v_c: w[0], alpha: w[1] }, &p);
                DVector::from_column_slice(r.as_slice())
            },
            &DVector::from_vec(vec![u.v_c, u.alpha]),
            GRADIENT_STEP,
        );
        let j = motion_jacobian_u(&pose, &u, &p);
        for i in 0..3 {
            for k in 0..2 {
                assert_relative_eq!(j[(i, k)], fd[(i, k)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn measurement_examples() {
        let z = measure_exact(&VehiclePose::new(0.0, 0.0, FRAC_PI_2), &Vector2::new(0.0, 5.0)).unwrap();
        assert_relative_eq!(z.range, 5.0, epsilon = 1e-15);
        assert_relative_eq!(z.bearing, FRAC_PI_2, epsilon = 1e-15);
        assert_eq!(
            measure_exact(&VehiclePose::new(1.0, 1.0, 0.0), &Vector2::new(1.0, 1.0)),
            Err(Error::CoincidentLandmark)
        );
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -FRAC_PI_2, epsilon = 1e-15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-50.0..50.0);
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI);
            assert!((w - a).sin().abs() < 1e-12 && (w - a).cos() > 0.0);
        }
    }

    #[test]
    fn inverse_observation_round_trip() {
        let model = VehicleModel::default();
        let pose = DVector::from_vec(vec![0.0, 0.0, FRAC_PI_2]);
        let inv = model.invert_observation(&pose, &Vector2::new(5.0, FRAC_PI_2)).unwrap();
        assert_relative_eq!(inv.landmark, Vector2::new(0.0, 5.0), epsilon = 1e-12);
        let pose = DVector::from_vec(vec![3.0, -1.0, 2.5]);
        let z = Vector2::new(7.0, -0.4);
        let inv = model.invert_observation(&pose, &z).unwrap();
        assert_relative_eq!(model.observe(&pose, &inv.landmark).unwrap(), z, epsilon = 1e-12);
    }

    #[test]
    fn circular_mean_heading() {
        let model = VehicleModel::default();
        let poses = [
            DVector::from_vec(vec![0.0, 0.0, PI - 0.1]),
            DVector::from_vec(vec![2.0, 0.0, -(PI - 0.1)]),
        ];
        let m = model.mean_pose(&poses, &[0.5, 0.5]);
        assert_relative_eq!(m[0], 1.0);
        assert_relative_eq!(m[2].abs(), PI, epsilon = 1e-12);
    }
}
