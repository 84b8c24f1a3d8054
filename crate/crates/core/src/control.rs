//! Concrete control problems: a particle passing a double slit, a two-link
//! robotic arm under inverse-dynamics control, and minimisation of the
//! Himmelblau function posed as a stochastic control problem.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, constrained_quadratic_minimize, newton_minimize, FnObjective, HessianPolicy, Interval,
    MinimizeResult, NewtonOptions, Objective,
};
use crate::pic::{
    euler_maruyama_step, optimal_control, run_closed_loop, shift_warm_start, simulate_closed_loop, ControlDynamics,
    ControlProblem, Horizon, PathObjective, PsiOptions, Trajectory, CONTROL_FD_STEP,
};
use crate::rng;
use crate::sampler::{standard_normal_vector, EnsembleOptions, MapKind};

// ---------------------------------------------------------------------------
// Double slit

/// A particle moves as `dx = u dt + sqrt(sigma) dW` from `t = 0` to `t_final`
/// and must pass through one of two slits in a wall at time `t_wall`; the
/// final cost is `x^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoubleSlitSpec {
    pub t_final: f64,
    pub t_wall: f64,
    pub slits: [(f64, f64); 2],
    pub x0: f64,
    pub sigma: f64,
    pub r: f64,
    pub dt: f64,
    pub pre_wall: PreWallSampling,
}

/// How guided paths before the wall are drawn around the constrained minimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreWallSampling {
    /// Gaussian about the minimum; `psi` uses the fraction of paths that
    /// pass the wall.
    Gaussian,
    /// The same Gaussian conditioned on passing through the slit, so that
    /// no path hits the wall; `psi` uses the Gaussian mass of the slit.
    #[default]
    Truncated,
}

impl Default for DoubleSlitSpec {
    fn default() -> Self {
        Self {
            t_final: 2.0,
            t_wall: 1.0,
            slits: [(-6.0, -4.0), (6.0, 8.0)],
            x0: 1.0,
            sigma: 1.0,
            r: 0.1,
            dt: 0.02,
            pre_wall: PreWallSampling::default(),
        }
    }
}

impl DoubleSlitSpec {
    pub fn validate(&self) -> Result<()> {
        let [(a, b), (c, d)] = self.slits;
        let ok = a < b && b < c && c < d && 0.0 < self.t_wall && self.t_wall < self.t_final
            && self.sigma > 0.0
            && self.r > 0.0
            && self.dt > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("inconsistent double slit parameters: {self:?}")))
        }
    }

    /// `gamma = r sigma`, the value that satisfies the noise/cost condition.
    pub fn gamma(&self) -> f64 {
        self.r * self.sigma
    }

    pub fn in_slit(&self, x: f64) -> bool {
        self.slits.iter().any(|&(lo, hi)| x >= lo && x <= hi)
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    fn wall_step(&self) -> usize {
        (self.t_wall / self.dt).round() as usize
    }
}

/// `+inf` at the wall time (nearest grid time) outside the slits, 0 elsewhere.
pub fn double_slit_potential(x: f64, t: f64, spec: &DoubleSlitSpec) -> f64 {
    if (t - spec.t_wall).abs() < 0.5 * spec.dt && !spec.in_slit(x) {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Whether a path on the grid `t, t + dt, ...` hits the wall.
pub fn double_slit_hits_wall(path: &[f64], t: f64, spec: &DoubleSlitSpec) -> bool {
    path.iter()
        .enumerate()
        .any(|(i, &x)| double_slit_potential(x, t + i as f64 * spec.dt, spec).is_infinite())
}

#[derive(Debug, Clone)]
pub struct DoubleSlitDynamics {
    pub spec: DoubleSlitSpec,
    pub wall: bool,
}

impl ControlDynamics for DoubleSlitDynamics {
    fn state_dim(&self) -> usize {
        1
    }
    fn drift(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn drift_jacobian(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn potential(&self, x: &DVector<f64>, t: f64) -> f64 {
        if self.wall {
            double_slit_potential(x[0], t, &self.spec)
        } else {
            0.0
        }
    }
    fn potential_gradient(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x[0] * x[0]
    }
    fn final_cost_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
}

/// The double slit as a control problem; `wall = false` drops the potential.
pub fn double_slit_problem(spec: &DoubleSlitSpec, wall: bool) -> Result<ControlProblem<DoubleSlitDynamics>> {
    spec.validate()?;
    ControlProblem::new(
        DoubleSlitDynamics { spec: *spec, wall },
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, spec.sigma.sqrt()),
        DMatrix::from_element(1, 1, spec.r),
        spec.gamma(),
    )
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `P(lo <= Z <= hi)` for a standard normal, accurate in both tails.
fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        std_normal_cdf(-lo) - std_normal_cdf(-hi)
    } else {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleSlitAnalytic {
    pub psi: f64,
    pub log_psi: f64,
    pub u: f64,
}

/// Closed-form desirability and optimal control.
///
/// After the wall, `psi = sqrt(gamma / (sigma s + gamma)) exp(-x^2 / (2 (sigma s + gamma)))`
/// with `s = t_final - t`. Before the wall, the Gaussian transition to the
/// wall time is integrated over both slits against the post-wall `psi`, which
/// reduces to normal interval probabilities.
pub fn double_slit_analytic(x: f64, t: f64, spec: &DoubleSlitSpec) -> DoubleSlitAnalytic {
    let gamma = spec.gamma();
    let sigma = spec.sigma;
    if t >= spec.t_wall - 1e-12 {
        let var = sigma * (spec.t_final - t) + gamma;
        let log_psi = 0.5 * (gamma / var).ln() - x * x / (2.0 * var);
        return DoubleSlitAnalytic {
            psi: log_psi.exp(),
            log_psi,
            u: -sigma * x / var,
        };
    }
    let s1 = sigma * (spec.t_wall - t);
    let s2 = sigma * (spec.t_final - spec.t_wall) + gamma;
    let total = s1 + s2;
    let precision = 1.0 / s1 + 1.0 / s2;
    let root = precision.sqrt();
    let centre = x * s2 / total;
    let mut mass = 0.0;
    let mut d_mass = 0.0;
    for &(lo, hi) in &spec.slits {
        let zl = (lo - centre) * root;
        let zh = (hi - centre) * root;
        mass += normal_interval(zl, zh);
        // d/dx of the interval probability; dz/dx = -root s2 / total
        d_mass += (std_normal_pdf(zh) - std_normal_pdf(zl)) * (-root * s2 / total);
    }
    let log_psi = 0.5 * (gamma / total).ln() - x * x / (2.0 * total) + mass.ln();
    let d_log_psi = -x / total + d_mass / mass;
    DoubleSlitAnalytic {
        psi: log_psi.exp(),
        log_psi,
        u: sigma * d_log_psi,
    }
}

/// Output of the guided pre-wall sampler.
#[derive(Debug, Clone)]
pub struct PreWallEstimate {
    pub log_psi: f64,
    pub phi: f64,
    /// Index of the slit whose constrained minimum was used.
    pub slit: usize,
    /// `phi` of the constrained minimum for each slit.
    pub slit_phi: [f64; 2],
    pub accepted: usize,
    pub samples: usize,
    /// Sampled paths including the starting point, on the grid `t, t + dt, ..., t_final`.
    pub paths: Vec<Vec<f64>>,
    pub mu: DVector<f64>,
}

/// Estimates `log psi(x, t)` for `t` before the wall.
///
/// The free (wall-less) path objective is minimised once per slit with the
/// wall-time coordinate restricted to that slit; samples are drawn with the
/// quadratic map around the lower of the two minima, and `psi` is
/// `exp(-phi) / det L` times the probability of passing the wall (see
/// [`PreWallSampling`]).
pub fn double_slit_sample_pre_wall(
    spec: &DoubleSlitSpec,
    x: f64,
    t: f64,
    samples: usize,
    seed: u64,
    stream: &[u64],
) -> Result<PreWallEstimate> {
    let problem = double_slit_problem(spec, false)?;
    let hessian = free_path_hessian(&problem, t, spec);
    pre_wall_with_hessian(&problem, &hessian, spec, x, t, samples, seed, stream)
}

/// Hessian of the wall-less path objective from `t`; it does not depend on the
/// path or on the starting point.
fn free_path_hessian(problem: &ControlProblem<DoubleSlitDynamics>, t: f64, spec: &DoubleSlitSpec) -> DMatrix<f64> {
    let horizon = Horizon::new(t, spec.t_final, spec.dt);
    let objective = PathObjective::new(problem, DVector::zeros(1), horizon);
    objective.hessian(&objective.constant_guess())
}

#[allow(clippy::too_many_arguments)]
fn pre_wall_with_hessian(
    problem: &ControlProblem<DoubleSlitDynamics>,
    hessian: &DMatrix<f64>,
    spec: &DoubleSlitSpec,
    x: f64,
    t: f64,
    samples: usize,
    seed: u64,
    stream: &[u64],
) -> Result<PreWallEstimate> {
    let horizon = Horizon::new(t, spec.t_final, spec.dt);
    let wall_index = ((spec.t_wall - t) / horizon.dt).round() as usize;
    if wall_index == 0 || wall_index > horizon.steps {
        return Err(Error::InvalidConfig(format!("time {t} is not before the wall")));
    }
    let objective = PathObjective::new(problem, DVector::from_element(1, x), horizon).with_hessian(hessian.clone());
    let opts = NewtonOptions::default();
    let guess = objective.constant_guess();
    let mut minima = Vec::with_capacity(2);
    for &(lo, hi) in &spec.slits {
        let window = Interval::new(lo, hi)?;
        minima.push(constrained_quadratic_minimize(&objective, &guess, wall_index - 1, window, &opts)?);
    }
    let slit_phi = [minima[0].value, minima[1].value];
    let slit = if slit_phi[0] <= slit_phi[1] { 0 } else { 1 };
    let best = &minima[slit];
    let chol = cholesky(hessian)?;
    let k = wall_index - 1;
    // Covariance column of the wall coordinate and its slit bounds in
    // standard units.
    let mut e_k = DVector::zeros(horizon.steps);
    e_k[k] = 1.0;
    let cov_k = chol.solve(&e_k);
    let sd = cov_k[k].sqrt();
    let (lo, hi) = spec.slits[slit];
    let (z_lo, z_hi) = ((lo - best.x[k]) / sd, (hi - best.x[k]) / sd);
    let slit_mass = normal_interval(z_lo, z_hi);
    let unit = Normal::standard();

    let mut paths = Vec::with_capacity(samples);
    let mut accepted = 0;
    for j in 0..samples {
        let mut path = stream.to_vec();
        path.push(j as u64);
        let mut r = rng::stream(seed, &path);
        let xi = standard_normal_vector(horizon.steps, &mut r);
        let mut y = &best.x + chol.solve_lower_transpose(&xi);
        if spec.pre_wall == PreWallSampling::Truncated {
            // Move the wall coordinate to its quantile in the slit and the
            // other coordinates by their regression on it.
            let z = (y[k] - best.x[k]) / sd;
            let u = unit.cdf(z_lo) + unit.cdf(z) * slit_mass;
            let target = unit.inverse_cdf(u).clamp(z_lo, z_hi);
            y += &cov_k * ((target - z) / sd);
        }
        if spec.in_slit(y[k]) {
            accepted += 1;
        }
        let mut full = Vec::with_capacity(horizon.steps + 1);
        full.push(x);
        full.extend(y.iter());
        paths.push(full);
    }
    if accepted == 0 {
        return Err(Error::DegenerateWeights);
    }
    let pass = match spec.pre_wall {
        PreWallSampling::Truncated => slit_mass,
        PreWallSampling::Gaussian => accepted as f64 / samples as f64,
    };
    let normalisation = 0.5 * horizon.steps as f64 * (spec.sigma * horizon.dt).ln();
    let log_psi = -best.value - chol.log_det_l() + pass.ln() - normalisation;
    Ok(PreWallEstimate {
        log_psi,
        phi: best.value,
        slit,
        slit_phi,
        accepted,
        samples,
        paths,
        mu: best.x.clone(),
    })
}

/// Uncontrolled Brownian paths from `(x, t)` to `t_final`; returns the paths
/// and how many of them hit the wall.
pub fn double_slit_unguided_walks(
    spec: &DoubleSlitSpec,
    x: f64,
    t: f64,
    count: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec<f64>>, usize) {
    let horizon = Horizon::new(t, spec.t_final, spec.dt);
    let scale = (spec.sigma * horizon.dt).sqrt();
    let paths: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let mut y = x;
            std::iter::once(x)
                .chain((1..=horizon.steps).map(|_| {
                    let w: f64 = StandardNormal.sample(rng);
                    y += scale * w;
                    y
                }))
                .collect()
        })
        .collect();
    let hits = paths.iter().filter(|p| double_slit_hits_wall(p, t, spec)).count();
    (paths, hits)
}

/// Numerical optimal control at `(x, t)`: the guided pre-wall sampler before
/// the wall, generic path integral control of the wall-less problem after it.
pub fn double_slit_numeric_control(
    spec: &DoubleSlitSpec,
    x: f64,
    t: f64,
    samples: usize,
    seed: u64,
    stream: &[u64],
) -> Result<f64> {
    if t < spec.t_wall - 0.5 * spec.dt {
        let h = CONTROL_FD_STEP * (1.0 + x.abs());
        let problem = double_slit_problem(spec, false)?;
        let hessian = free_path_hessian(&problem, t, spec);
        let plus = pre_wall_with_hessian(&problem, &hessian, spec, x + h, t, samples, seed, stream)?;
        let minus = pre_wall_with_hessian(&problem, &hessian, spec, x - h, t, samples, seed, stream)?;
        Ok(spec.sigma * (plus.log_psi - minus.log_psi) / (2.0 * h))
    } else {
        let problem = double_slit_problem(spec, false)?;
        let opts = PsiOptions {
            samples,
            ensemble: EnsembleOptions {
                map: MapKind::Quadratic,
                ..EnsembleOptions::default()
            },
            newton: NewtonOptions::default(),
            quadratic: true,
        };
        let horizon = Horizon::new(t, spec.t_final, spec.dt);
        let est = optimal_control(
            &problem,
            &DVector::from_element(1, x),
            horizon,
            &opts,
            CONTROL_FD_STEP,
            None,
            seed,
            stream,
        )?;
        Ok(est.u[0])
    }
}

/// One closed-loop comparison of numerical and analytic control driven by
/// the same noise.
#[derive(Debug, Clone)]
pub struct DoubleSlitRun {
    pub times: Vec<f64>,
    pub x_numeric: Vec<f64>,
    pub x_analytic: Vec<f64>,
    pub u_numeric: Vec<f64>,
    pub u_analytic: Vec<f64>,
    /// `|x_num - x_ana| / |x_ana|` over the whole trajectory.
    pub error_x: f64,
    /// `|u_num - u_ana| / |u_ana|` over all controls.
    pub error_u: f64,
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let base: f64 = b.iter().map(|y| y * y).sum();
    (diff / base).sqrt()
}

pub fn double_slit_closed_loop(spec: &DoubleSlitSpec, samples: usize, seed: u64) -> Result<DoubleSlitRun> {
    spec.validate()?;
    let steps = spec.steps();
    let scale = (spec.sigma * spec.dt).sqrt();
    let plant = |k: usize, _t: f64, x: &DVector<f64>, u: &DVector<f64>| {
        let mut r = rng::stream(seed, &[rng::tag::PLANT, k as u64]);
        let w: f64 = StandardNormal.sample(&mut r);
        DVector::from_element(1, x[0] + u[0] * spec.dt + scale * w)
    };
    let x0 = DVector::from_element(1, spec.x0);
    let wall_step = spec.wall_step();
    let numeric = run_closed_loop(&x0, 0.0, spec.dt, steps, |k, _t, x| {
        let t = k as f64 * spec.dt;
        let t = if k == wall_step { spec.t_wall } else { t };
        let u = double_slit_numeric_control(spec, x[0], t, samples, seed, &[rng::tag::SAMPLER, k as u64])?;
        Ok(DVector::from_element(1, u))
    }, plant)?;
    let analytic = run_closed_loop(&x0, 0.0, spec.dt, steps, |k, _t, x| {
        let t = k as f64 * spec.dt;
        let t = if k == wall_step { spec.t_wall } else { t };
        Ok(DVector::from_element(1, double_slit_analytic(x[0], t, spec).u))
    }, plant)?;
    let flat = |traj: &Trajectory| -> (Vec<f64>, Vec<f64>) {
        (traj.states.iter().map(|x| x[0]).collect(), traj.controls.iter().map(|u| u[0]).collect())
    };
    let (x_numeric, u_numeric) = flat(&numeric);
    let (x_analytic, u_analytic) = flat(&analytic);
    Ok(DoubleSlitRun {
        times: numeric.times.clone(),
        error_x: relative_error(&x_numeric, &x_analytic),
        error_u: relative_error(&u_numeric, &u_analytic),
        x_numeric,
        x_analytic,
        u_numeric,
        u_analytic,
    })
}

// ---------------------------------------------------------------------------
// Two-link arm

/// Inertial parameters of the two-link arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    pub l1: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub m1: f64,
    pub m2: f64,
    pub i1: f64,
    pub i2: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            l1: 1.0,
            lc1: 0.5,
            lc2: 0.5,
            m1: 1.0,
            m2: 1.0,
            i1: 2.0,
            i2: 2.0,
        }
    }
}

impl ArmParams {
    /// `(a1, a2, a3)`.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let a1 = self.m1 * self.lc1.powi(2) + self.m2 * self.lc1.powi(2) + self.m2 * self.lc2.powi(2) + self.i1 + self.i2;
        let a2 = self.m2 * self.lc2.powi(2) + self.i2;
        let a3 = self.l1 * self.m2 * self.lc2;
        (a1, a2, a3)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.lc1, self.lc2, self.m1, self.m2, self.i1, self.i2];
        if all.iter().all(|v| *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("arm parameters must be positive: {self:?}")))
        }
    }
}

/// Mass matrix `M(theta)` and Coriolis matrix `C(theta, theta_dot)` of
/// `M theta_ddot + C theta_dot = tau`.
pub fn arm_matrices(theta: &Vector2<f64>, theta_dot: &Vector2<f64>, params: &ArmParams) -> (Matrix2<f64>, Matrix2<f64>) {
    let (a1, a2, a3) = params.coefficients();
    let (s, c) = theta[1].sin_cos();
    let m = Matrix2::new(a1 + 2.0 * a3 * c, a2 + a3 * c, a2 + a3 * c, a2);
    let cor = Matrix2::new(
        -a3 * s * theta_dot[1],
        -a3 * (theta_dot[0] + theta_dot[1]) * s,
        a3 * s * theta_dot[0],
        0.0,
    );
    (m, cor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmSpec {
    /// Parameters of the simulated arm.
    pub plant: ArmParams,
    /// Parameters the controller believes in.
    pub controller: ArmParams,
    pub target: [f64; 2],
    pub theta0: [f64; 2],
    pub r: f64,
    pub t_final: f64,
    pub dt: f64,
    /// Standard deviation of the angular-acceleration noise of the plant
    /// (per square root of time).
    pub plant_noise: f64,
    pub substeps: usize,
}

impl Default for ArmSpec {
    fn default() -> Self {
        Self {
            plant: ArmParams::default(),
            controller: ArmParams::default(),
            target: [std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_4],
            theta0: [0.0, 0.0],
            r: 1e-5,
            t_final: 2.0,
            dt: 0.02,
            plant_noise: 0.01,
            substeps: 10,
        }
    }
}

/// The inverse-dynamics linearised arm `theta_ddot = u`, state
/// `(theta_1, theta_2, theta_dot_1, theta_dot_2)`, final cost
/// `|theta - target|^2 / 2 + |theta_dot|^2 / 2`.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    pub target: [f64; 2],
}

impl ControlDynamics for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        4
    }
    fn drift(&self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::from_vec(vec![x[2], x[3], 0.0, 0.0])
    }
    fn drift_jacobian(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        a
    }
    fn potential_gradient(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(4)
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * ((x[0] - self.target[0]).powi(2) + (x[1] - self.target[1]).powi(2) + x[2] * x[2] + x[3] * x[3])
    }
    fn final_cost_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0] - self.target[0], x[1] - self.target[1], x[2], x[3]])
    }
}

/// Double integrator with `G = [0; I]`, `Q = I`, `R = r I` and `gamma = r`.
pub fn arm_control_problem(spec: &ArmSpec) -> Result<ControlProblem<DoubleIntegrator>> {
    let mut g = DMatrix::zeros(4, 2);
    g[(2, 0)] = 1.0;
    g[(3, 1)] = 1.0;
    ControlProblem::new(
        DoubleIntegrator { target: spec.target },
        g,
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * spec.r,
        spec.r,
    )
}

/// Options that make the arm controller deterministic: a single quadratic-map
/// sample of a quadratic objective carries zero log weight, so the estimate is
/// `-phi - log det L` up to the path normalisation.
pub fn arm_psi_options() -> PsiOptions {
    PsiOptions {
        samples: 1,
        ensemble: EnsembleOptions {
            map: MapKind::Quadratic,
            ..EnsembleOptions::default()
        },
        newton: NewtonOptions::default(),
        quadratic: true,
    }
}

/// `log psi` from the minimum and Hessian of the (quadratic) path objective
/// alone, with the same path normalisation as [`crate::pic::estimate_psi`].
pub fn arm_semi_analytic_log_psi(
    problem: &ControlProblem<DoubleIntegrator>,
    x: &DVector<f64>,
    horizon: Horizon,
) -> Result<f64> {
    let objective = PathObjective::new(problem, x.clone(), horizon);
    let prep = crate::sampler::prepare(&objective, &objective.constant_guess(), &NewtonOptions::default())?;
    // noise covariance on the velocities is the identity
    let normalisation = horizon.steps as f64 * horizon.dt.ln();
    Ok(-prep.phi - prep.chol.log_det_l() - normalisation)
}

#[derive(Debug, Clone, Default)]
pub struct ArmRun {
    pub times: Vec<f64>,
    pub theta: Vec<[f64; 2]>,
    pub theta_dot: Vec<[f64; 2]>,
    pub torque: Vec<[f64; 2]>,
}

impl ArmRun {
    pub fn final_position_error(&self, target: [f64; 2]) -> f64 {
        let th = self.theta.last().copied().unwrap_or([f64::NAN; 2]);
        ((th[0] - target[0]).powi(2) + (th[1] - target[1]).powi(2)).sqrt()
    }

    pub fn final_speed(&self) -> f64 {
        let v = self.theta_dot.last().copied().unwrap_or([f64::NAN; 2]);
        (v[0] * v[0] + v[1] * v[1]).sqrt()
    }
}

/// Advances the true arm by `dt` with forward-Euler substeps under a constant
/// torque; noise enters the angular accelerations.
pub fn arm_plant_step(
    theta: &mut Vector2<f64>,
    theta_dot: &mut Vector2<f64>,
    torque: &Vector2<f64>,
    params: &ArmParams,
    dt: f64,
    substeps: usize,
    noise: f64,
    rng: &mut impl Rng,
) {
    let h = dt / substeps as f64;
    for _ in 0..substeps {
        let (m, c) = arm_matrices(theta, theta_dot, params);
        let rhs = torque - c * *theta_dot;
        let acc = m.lu().solve(&rhs).unwrap_or_else(Vector2::zeros);
        let w = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
        *theta += *theta_dot * h;
        *theta_dot += acc * h + w * (noise * h.sqrt());
    }
}

/// Receding-horizon path integral control of the arm: the controller plans on
/// the double integrator, converts `u` into torques with its own (possibly
/// wrong) parameters, and the plant integrates the true nonlinear dynamics.
pub fn arm_closed_loop(spec: &ArmSpec, seed: u64) -> Result<ArmRun> {
    spec.plant.validate()?;
    spec.controller.validate()?;
    let problem = arm_control_problem(spec)?;
    let opts = arm_psi_options();
    let steps = (spec.t_final / spec.dt).round() as usize;
    let mut theta = Vector2::from(spec.theta0);
    let mut theta_dot = Vector2::zeros();
    let mut run = ArmRun {
        times: vec![0.0],
        theta: vec![spec.theta0],
        theta_dot: vec![[0.0; 2]],
        torque: Vec::with_capacity(steps),
    };
    let mut warm: Option<DVector<f64>> = None;
    for k in 0..steps {
        let t = k as f64 * spec.dt;
        let x = DVector::from_vec(vec![theta[0], theta[1], theta_dot[0], theta_dot[1]]);
        let horizon = Horizon::new(t, spec.t_final, spec.dt);
        let start = warm.as_ref().map(|mu| shift_warm_start(mu, 2, horizon.steps));
        let est = optimal_control(&problem, &x, horizon, &opts, CONTROL_FD_STEP, start.as_ref(), seed, &[rng::tag::SAMPLER, k as u64])?;
        warm = Some(est.center.mu.clone());
        let u = Vector2::new(est.u[0], est.u[1]);
        let (m, c) = arm_matrices(&theta, &theta_dot, &spec.controller);
        let torque = c * theta_dot + m * u;
        let mut r = rng::stream(seed, &[rng::tag::PLANT, k as u64]);
        arm_plant_step(&mut theta, &mut theta_dot, &torque, &spec.plant, spec.dt, spec.substeps, spec.plant_noise, &mut r);
        run.times.push(t + spec.dt);
        run.theta.push([theta[0], theta[1]]);
        run.theta_dot.push([theta_dot[0], theta_dot[1]]);
        run.torque.push([torque[0], torque[1]]);
    }
    Ok(run)
}

// ---------------------------------------------------------------------------
// Himmelblau

pub fn himmelblau(x1: f64, x2: f64) -> f64 {
    (x1 * x1 + x2 - 11.0).powi(2) + (x1 + x2 * x2 - 7.0).powi(2)
}

pub fn himmelblau_gradient(x1: f64, x2: f64) -> Vector2<f64> {
    let a = x1 * x1 + x2 - 11.0;
    let b = x1 + x2 * x2 - 7.0;
    Vector2::new(4.0 * x1 * a + 2.0 * b, 2.0 * a + 4.0 * x2 * b)
}

pub fn himmelblau_hessian(x1: f64, x2: f64) -> Matrix2<f64> {
    let a = x1 * x1 + x2 - 11.0;
    let b = x1 + x2 * x2 - 7.0;
    let off = 4.0 * (x1 + x2);
    Matrix2::new(4.0 * a + 8.0 * x1 * x1 + 2.0, off, off, 2.0 + 4.0 * b + 8.0 * x2 * x2)
}

/// The Himmelblau function as an [`Objective`] with exact derivatives.
pub fn himmelblau_objective() -> FnObjective {
    FnObjective::new(2, |x| himmelblau(x[0], x[1]))
        .with_gradient(|x| {
            let g = himmelblau_gradient(x[0], x[1]);
            DVector::from_column_slice(g.as_slice())
        })
        .with_hessian(|x| {
            let h = himmelblau_hessian(x[0], x[1]);
            DMatrix::from_column_slice(2, 2, h.as_slice())
        })
}

/// Plain Newton iteration (Hessian used as is) from `x0`.
pub fn newton_himmelblau(x0: [f64; 2], max_iter: usize) -> MinimizeResult {
    let opts = NewtonOptions {
        max_iter,
        policy: HessianPolicy::AsIs,
        ..NewtonOptions::default()
    };
    newton_minimize(&himmelblau_objective(), &DVector::from_column_slice(&x0), &opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StochOptSpec {
    pub r: f64,
    pub sigma: f64,
    pub dt: f64,
    pub t_final: f64,
    pub x0: [f64; 2],
    pub samples: usize,
    pub map: MapKind,
}

impl Default for StochOptSpec {
    fn default() -> Self {
        Self {
            r: 0.01,
            sigma: 0.01,
            dt: 1.0,
            t_final: 20.0,
            x0: [-1.0, -4.0],
            samples: 50,
            map: MapKind::Random,
        }
    }
}

impl StochOptSpec {
    /// `gamma = R sigma`, so that `gamma R^-1 = sigma I`.
    pub fn gamma(&self) -> f64 {
        self.r * self.sigma
    }
}

#[derive(Debug, Clone)]
pub struct HimmelblauDynamics;

impl ControlDynamics for HimmelblauDynamics {
    fn state_dim(&self) -> usize {
        2
    }
    fn drift(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn drift_jacobian(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn potential_gradient(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        himmelblau(x[0], x[1])
    }
    fn final_cost_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = himmelblau_gradient(x[0], x[1]);
        DVector::from_column_slice(g.as_slice())
    }
}

pub fn himmelblau_control_problem(spec: &StochOptSpec) -> Result<ControlProblem<HimmelblauDynamics>> {
    ControlProblem::new(
        HimmelblauDynamics,
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * spec.sigma.sqrt(),
        DMatrix::identity(2, 2) * spec.r,
        spec.gamma(),
    )
}

#[derive(Debug, Clone)]
pub struct StochOptRun {
    pub iterates: Vec<[f64; 2]>,
    pub f_values: Vec<f64>,
    pub final_f: f64,
    /// Realised `f(x(t_final)) + sum u^T R u dt`.
    pub cost: f64,
}

/// Minimises the Himmelblau function by driving `dx = u dt + sqrt(sigma) dW`
/// with path integral control whose final cost is the function itself.
pub fn stochastic_optimize(spec: &StochOptSpec, seed: u64) -> Result<StochOptRun> {
    let problem = himmelblau_control_problem(spec)?;
    let opts = PsiOptions {
        samples: spec.samples,
        ensemble: EnsembleOptions {
            map: spec.map,
            ..EnsembleOptions::default()
        },
        newton: NewtonOptions::default(),
        quadratic: false,
    };
    let traj = simulate_closed_loop(&problem, &DVector::from_column_slice(&spec.x0), 0.0, spec.t_final, spec.dt, &opts, 1.0, seed)?;
    let iterates: Vec<[f64; 2]> = traj.states.iter().map(|x| [x[0], x[1]]).collect();
    let f_values: Vec<f64> = iterates.iter().map(|x| himmelblau(x[0], x[1])).collect();
    let final_f = *f_values.last().unwrap_or(&f64::NAN);
    let control_cost: f64 = traj.controls.iter().map(|u| spec.r * u.norm_squared() * spec.dt).sum();
    Ok(StochOptRun {
        iterates,
        f_values,
        final_f,
        cost: final_f + control_cost,
    })
}

/// One Euler-Maruyama step of the Himmelblau plant, exposed for tests.
pub fn himmelblau_plant_step(spec: &StochOptSpec, x: &DVector<f64>, u: &DVector<f64>, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let problem = himmelblau_control_problem(spec)?;
    Ok(euler_maruyama_step(&problem, x, 0.0, u, spec.dt, 1.0, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn potential_examples() {
        let s = DoubleSlitSpec::default();
        assert_eq!(double_slit_potential(-5.0, 1.0, &s), 0.0);
        assert!(double_slit_potential(0.0, 1.0, &s).is_infinite());
        assert_eq!(double_slit_potential(0.0, 0.5, &s), 0.0);
    }

    #[test]
    fn arm_coefficients() {
        let (a1, a2, a3) = ArmParams::default().coefficients();
        assert_relative_eq!(a1, 4.75);
        assert_relative_eq!(a2, 2.25);
        assert_relative_eq!(a3, 0.5);
        let (m, c) = arm_matrices(&Vector2::new(0.3, 0.0), &Vector2::zeros(), &ArmParams::default());
        assert_eq!(c, Matrix2::zeros());
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn himmelblau_values() {
        assert_eq!(himmelblau(3.0, 2.0), 0.0);
        assert_relative_eq!(himmelblau(-1.0, -4.0), 260.0);
    }

    #[test]
    fn post_wall_analytic_is_symmetric() {
        let s = DoubleSlitSpec::default();
        assert_eq!(double_slit_analytic(0.0, 1.5, &s).u, 0.0);
        let near_end = double_slit_analytic(0.7, s.t_final, &s);
        assert_relative_eq!(near_end.log_psi, -0.49 / (2.0 * s.gamma()), epsilon = 1e-12);
    }
}
