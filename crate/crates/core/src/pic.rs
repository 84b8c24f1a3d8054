//! Path integral control.
//!
//! For dynamics `dx = (f(x,t) + G u) dt + G Q dW` with cost
//! `Phi(x(t_f)) + int V dt + int u^T R u / 2 dt` and the noise/cost
//! consistency condition `gamma G R^-1 G^T = G Q Q^T G^T`, the value function
//! is `J = -gamma log psi`, where the desirability `psi` is an expectation over
//! uncontrolled noisy paths. The path expectation is discretised with forward
//! Euler and the trapezoid rule, and estimated with implicit sampling over the
//! noise-driven state coordinates. The optimal control is
//! `u = gamma R^-1 G^T grad_x log psi`, with the gradient taken by central
//! differences that reuse the same random numbers at every stencil point.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, finite_diff_gradient, finite_diff_jacobian, hessian_from_gradient, inf_norm, NewtonOptions,
    Objective, GRADIENT_STEP,
};
use crate::rng;
use crate::sampler::{draw_ensemble, log_mean_exp, prepare, EnsembleOptions};

/// Value substituted for an infinite potential inside the objective that is
/// handed to the minimiser.
pub const POTENTIAL_CAP: f64 = 1e12;

/// Drift, running potential and final cost of a control problem.
pub trait ControlDynamics: Sync {
    fn state_dim(&self) -> usize;

    fn drift(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;

    fn drift_jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        finite_diff_jacobian(|y| self.drift(y, t), x, GRADIENT_STEP)
    }

    /// Running state cost; may be `+inf` (hard obstacles).
    fn potential(&self, _x: &DVector<f64>, _t: f64) -> f64 {
        0.0
    }

    fn potential_gradient(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        finite_diff_gradient(|y| self.potential(y, t).min(POTENTIAL_CAP), x, GRADIENT_STEP)
    }

    fn final_cost(&self, x: &DVector<f64>) -> f64;

    fn final_cost_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        finite_diff_gradient(|y| self.final_cost(y), x, GRADIENT_STEP)
    }
}

/// A control problem with its noise and cost matrices.
#[derive(Debug, Clone)]
pub struct ControlProblem<D> {
    pub dynamics: D,
    pub g: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma: f64,
    sigma: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    noise_rows: Vec<usize>,
    noise_precision: DMatrix<f64>,
    noise_log_det: f64,
}

impl<D: ControlDynamics> ControlProblem<D> {
    /// Checks `gamma G R^-1 G^T = G Q Q^T G^T` (relative tolerance 1e-9) and
    /// that the noise covariance restricted to the noise-driven coordinates is
    /// positive definite.
    pub fn new(dynamics: D, g: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let m = dynamics.state_dim();
        if g.nrows() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: g.nrows(),
            });
        }
        let r_chol = cholesky(&r).map_err(|_| Error::InvalidControlCost)?;
        let r_inv = r_chol.inverse();
        let sigma = &g * &q * q.transpose() * g.transpose();
        let scaled = &g * &r_inv * g.transpose() * gamma;
        let tol = 1e-9 * inf_norm(&sigma).max(1.0);
        if (&scaled - &sigma).abs().max() > tol {
            return Err(Error::ConditionViolated {
                scaled_control_cost: scaled,
                noise_covariance: sigma,
            });
        }
        let noise_rows: Vec<usize> = (0..m).filter(|&i| g.row(i).iter().any(|v| *v != 0.0)).collect();
        let p = noise_rows.len();
        let sigma_nn = DMatrix::from_fn(p, p, |i, j| sigma[(noise_rows[i], noise_rows[j])]);
        let chol = cholesky(&sigma_nn)?;
        Ok(Self {
            dynamics,
            g,
            q,
            r,
            gamma,
            noise_precision: chol.inverse(),
            noise_log_det: 2.0 * chol.log_det_l(),
            sigma,
            r_inv,
            noise_rows,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    /// `G Q Q^T G^T`.
    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// State coordinates that receive noise (nonzero rows of `G`); these are
    /// the sampling variables of the path objective.
    pub fn noise_rows(&self) -> &[usize] {
        &self.noise_rows
    }

    fn deterministic_rows(&self) -> Vec<usize> {
        (0..self.state_dim()).filter(|i| !self.noise_rows.contains(i)).collect()
    }

    /// `u = -R^-1 G^T grad_x J = gamma R^-1 G^T grad_x log psi`.
    pub fn control_from_gradient(&self, grad_log_psi: &DVector<f64>) -> DVector<f64> {
        &self.r_inv * self.g.transpose() * grad_log_psi * self.gamma
    }
}

/// Time grid from `t0` to `t_final` in `steps` equal steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl Horizon {
    /// Uses `round((t_final - t0) / dt)` steps (at least one), adjusting the
    /// step so the grid ends exactly at `t_final`.
    pub fn new(t0: f64, t_final: f64, dt: f64) -> Self {
        let steps = ((t_final - t0) / dt).round().max(1.0) as usize;
        Self {
            t0,
            dt: (t_final - t0) / steps as f64,
            steps,
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }
}

/// The discretised negative log path weight `F` as a function of the
/// noise-driven coordinates at steps `1..=n` (stacked step by step).
pub struct PathObjective<'a, D> {
    problem: &'a ControlProblem<D>,
    x0: DVector<f64>,
    horizon: Horizon,
    deterministic: Vec<usize>,
    fixed_hessian: Option<DMatrix<f64>>,
}

impl<'a, D: ControlDynamics> PathObjective<'a, D> {
    pub fn new(problem: &'a ControlProblem<D>, x0: DVector<f64>, horizon: Horizon) -> Self {
        Self {
            deterministic: problem.deterministic_rows(),
            problem,
            x0,
            horizon,
            fixed_hessian: None,
        }
    }

    /// Uses `hessian` for every Hessian request. Valid when the objective is
    /// quadratic in the path coordinates (linear drift, quadratic final cost,
    /// no potential), where the Hessian depends on neither the path nor `x0`.
    pub fn with_hessian(mut self, hessian: DMatrix<f64>) -> Self {
        self.fixed_hessian = Some(hessian);
        self
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    fn p(&self) -> usize {
        self.problem.noise_rows.len()
    }

    /// Full states `x_0, ..., x_n` for the given noise coordinates;
    /// deterministic coordinates follow forward Euler.
    pub fn states(&self, y: &DVector<f64>) -> Vec<DVector<f64>> {
        let p = self.p();
        let mut xs = Vec::with_capacity(self.horizon.steps + 1);
        xs.push(self.x0.clone());
        for i in 1..=self.horizon.steps {
            let prev = &xs[i - 1];
            let mut next = prev.clone();
            if !self.deterministic.is_empty() {
                let f = self.problem.dynamics.drift(prev, self.horizon.time(i - 1));
                for &d in &self.deterministic {
                    next[d] = prev[d] + self.horizon.dt * f[d];
                }
            }
            for (k, &nc) in self.problem.noise_rows.iter().enumerate() {
                next[nc] = y[(i - 1) * p + k];
            }
            xs.push(next);
        }
        xs
    }

    /// Noise coordinates of a full state path (inverse of [`Self::states`]).
    pub fn coordinates(&self, states: &[DVector<f64>]) -> DVector<f64> {
        let p = self.p();
        DVector::from_fn(self.horizon.steps * p, |j, _| {
            states[j / p + 1][self.problem.noise_rows[j % p]]
        })
    }

    /// Initial guess holding the noise coordinates at their current values.
    pub fn constant_guess(&self) -> DVector<f64> {
        let p = self.p();
        DVector::from_fn(self.horizon.steps * p, |j, _| self.x0[self.problem.noise_rows[j % p]])
    }

    fn residual(&self, prev: &DVector<f64>, f: &DVector<f64>, next: &DVector<f64>) -> DVector<f64> {
        let dt = self.horizon.dt;
        DVector::from_iterator(
            self.p(),
            self.problem.noise_rows.iter().map(|&nc| (next[nc] - prev[nc]) / dt - f[nc]),
        )
    }
}

impl<D: ControlDynamics> Objective for PathObjective<'_, D> {
    fn dim(&self) -> usize {
        self.horizon.steps * self.p()
    }

    fn value(&self, y: &DVector<f64>) -> f64 {
        let xs = self.states(y);
        let dt = self.horizon.dt;
        let gamma = self.problem.gamma;
        let dynamics = &self.problem.dynamics;
        let capped = |x: &DVector<f64>, t: f64| dynamics.potential(x, t).min(POTENTIAL_CAP);
        let mut total = 0.0;
        let mut v_prev = capped(&xs[0], self.horizon.t0);
        for i in 1..=self.horizon.steps {
            let f = dynamics.drift(&xs[i - 1], self.horizon.time(i - 1));
            let r = self.residual(&xs[i - 1], &f, &xs[i]);
            total += 0.5 * dt * r.dot(&(&self.problem.noise_precision * &r));
            let v = capped(&xs[i], self.horizon.time(i));
            total += 0.5 * dt / gamma * (v + v_prev);
            v_prev = v;
        }
        total + dynamics.final_cost(&xs[self.horizon.steps]) / gamma
    }

    /// Adjoint (reverse) sweep through the Euler recursion.
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let xs = self.states(y);
        let n = self.horizon.steps;
        let m = self.x0.len();
        let p = self.p();
        let dt = self.horizon.dt;
        let gamma = self.problem.gamma;
        let dynamics = &self.problem.dynamics;
        let noise_rows = &self.problem.noise_rows;

        let mut partial = vec![DVector::<f64>::zeros(m); n + 1];
        let mut jacobians = Vec::with_capacity(n);
        for i in 1..=n {
            let t_prev = self.horizon.time(i - 1);
            let prev = &xs[i - 1];
            let f = dynamics.drift(prev, t_prev);
            let jac = dynamics.drift_jacobian(prev, t_prev);
            let r = self.residual(prev, &f, &xs[i]);
            let w = &self.problem.noise_precision * &r;
            for (k, &nc) in noise_rows.iter().enumerate() {
                partial[i][nc] += w[k];
                partial[i - 1][nc] -= w[k];
                for c in 0..m {
                    partial[i - 1][c] -= dt * jac[(nc, c)] * w[k];
                }
            }
            let scale = 0.5 * dt / gamma;
            partial[i] += dynamics.potential_gradient(&xs[i], self.horizon.time(i)) * scale;
            partial[i - 1] += dynamics.potential_gradient(prev, t_prev) * scale;
            jacobians.push(jac);
        }
        partial[n] += dynamics.final_cost_gradient(&xs[n]) / gamma;

        let mut grad = DVector::zeros(n * p);
        let mut adjoint = partial[n].clone();
        for i in (1..=n).rev() {
            for (k, &nc) in noise_rows.iter().enumerate() {
                grad[(i - 1) * p + k] = adjoint[nc];
            }
            if i == 1 {
                break;
            }
            // x_i[d] = x_{i-1}[d] + dt f_d(x_{i-1}) for deterministic rows d
            let jac = &jacobians[i - 1];
            let mut next = partial[i - 1].clone();
            for &d in &self.deterministic {
                next[d] += adjoint[d];
                for c in 0..m {
                    next[c] += dt * jac[(d, c)] * adjoint[d];
                }
            }
            adjoint = next;
        }
        grad
    }

    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        if let Some(h) = &self.fixed_hessian {
            return h.clone();
        }
        hessian_from_gradient(|z| self.gradient(z), y, GRADIENT_STEP)
    }
}

/// `Phi(x_n) + int V dt` (trapezoid rule), divided by `gamma`, for a full state
/// path `x_0..x_n` on the horizon grid. Infinite potentials stay infinite.
pub fn path_cost_g<D: ControlDynamics>(problem: &ControlProblem<D>, states: &[DVector<f64>], horizon: Horizon) -> f64 {
    let d = &problem.dynamics;
    let mut running = 0.0;
    for i in 1..states.len() {
        running += 0.5
            * horizon.dt
            * (d.potential(&states[i], horizon.time(i)) + d.potential(&states[i - 1], horizon.time(i - 1)));
    }
    (running + d.final_cost(&states[states.len() - 1])) / problem.gamma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiOptions {
    pub samples: usize,
    pub ensemble: EnsembleOptions,
    pub newton: NewtonOptions,
    /// The path objective is quadratic, so its Hessian is computed once per
    /// control evaluation and shared by all stencil points.
    pub quadratic: bool,
}

impl Default for PsiOptions {
    fn default() -> Self {
        Self {
            samples: 50,
            ensemble: EnsembleOptions::default(),
            newton: NewtonOptions::default(),
            quadratic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PsiEstimate {
    /// `log psi` including the normalisation of the discrete path density.
    pub log_psi: f64,
    pub phi: f64,
    pub mu: DVector<f64>,
    pub log_det_l: f64,
    pub failures: usize,
}

/// Estimates `log psi(x, t)` by implicit sampling of the path objective.
///
/// `seed` and `stream` select the random numbers; reusing them across calls
/// gives common random numbers.
pub fn estimate_psi<D: ControlDynamics>(
    problem: &ControlProblem<D>,
    x: &DVector<f64>,
    horizon: Horizon,
    opts: &PsiOptions,
    warm_start: Option<&DVector<f64>>,
    seed: u64,
    stream: &[u64],
) -> Result<PsiEstimate> {
    estimate_psi_with(problem, x, horizon, opts, warm_start, None, seed, stream)
}

#[allow(clippy::too_many_arguments)]
fn estimate_psi_with<D: ControlDynamics>(
    problem: &ControlProblem<D>,
    x: &DVector<f64>,
    horizon: Horizon,
    opts: &PsiOptions,
    warm_start: Option<&DVector<f64>>,
    hessian: Option<&DMatrix<f64>>,
    seed: u64,
    stream: &[u64],
) -> Result<PsiEstimate> {
    let mut objective = PathObjective::new(problem, x.clone(), horizon);
    if let Some(h) = hessian {
        objective = objective.with_hessian(h.clone());
    }
    let guess = warm_start.cloned().unwrap_or_else(|| objective.constant_guess());
    let prep = prepare(&objective, &guess, &opts.newton)?;
    let ensemble = draw_ensemble(&objective, &prep, opts.samples, &opts.ensemble, seed, stream);
    let log_mean = log_mean_exp(&ensemble.log_evidences(&prep));
    if !log_mean.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let normalisation = 0.5 * horizon.steps as f64 * (problem.noise_log_det + problem.noise_rows.len() as f64 * horizon.dt.ln());
    Ok(PsiEstimate {
        log_psi: log_mean - normalisation,
        phi: prep.phi,
        log_det_l: prep.chol.log_det_l(),
        mu: prep.mu,
        failures: ensemble.failures,
    })
}

#[derive(Debug, Clone)]
pub struct ControlEstimate {
    pub u: DVector<f64>,
    pub grad_log_psi: DVector<f64>,
    pub center: PsiEstimate,
}

/// Default relative step of the central-difference stencil.
pub const CONTROL_FD_STEP: f64 = 1e-3;

/// Optimal control at `(x, t)` from a central-difference stencil of
/// `log psi`, using step `fd_step * (1 + |x|_inf)` and the same random numbers
/// at every stencil point. Only coordinates that `G^T` sees are differenced.
#[allow(clippy::too_many_arguments)]
pub fn optimal_control<D: ControlDynamics>(
    problem: &ControlProblem<D>,
    x: &DVector<f64>,
    horizon: Horizon,
    opts: &PsiOptions,
    fd_step: f64,
    warm_start: Option<&DVector<f64>>,
    seed: u64,
    stream: &[u64],
) -> Result<ControlEstimate> {
    let hessian = if opts.quadratic {
        let objective = PathObjective::new(problem, x.clone(), horizon);
        Some(objective.hessian(&objective.constant_guess()))
    } else {
        None
    };
    let hessian = hessian.as_ref();
    let center = estimate_psi_with(problem, x, horizon, opts, warm_start, hessian, seed, stream)?;
    let h = fd_step * (1.0 + x.amax());
    let mut grad = DVector::zeros(x.len());
    for &k in problem.noise_rows() {
        let mut xp = x.clone();
        xp[k] += h;
        let mut xm = x.clone();
        xm[k] -= h;
        let plus = estimate_psi_with(problem, &xp, horizon, opts, Some(&center.mu), hessian, seed, stream)?;
        let minus = estimate_psi_with(problem, &xm, horizon, opts, Some(&center.mu), hessian, seed, stream)?;
        grad[k] = (plus.log_psi - minus.log_psi) / (2.0 * h);
    }
    Ok(ControlEstimate {
        u: problem.control_from_gradient(&grad),
        grad_log_psi: grad,
        center,
    })
}

/// Shifts a warm start one step forward in time: drops the first step and
/// repeats the last one, or truncates when the horizon shrinks.
pub fn shift_warm_start(mu: &DVector<f64>, p: usize, new_steps: usize) -> DVector<f64> {
    let old_steps = mu.len() / p;
    DVector::from_fn(new_steps * p, |j, _| {
        let step = (j / p + 1).min(old_steps - 1);
        mu[step * p + j % p]
    })
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

/// Runs a receding-horizon loop: at each of `steps` steps the controller
/// picks `u`, then the plant advances the state by `dt`.
pub fn run_closed_loop(
    x0: &DVector<f64>,
    t0: f64,
    dt: f64,
    steps: usize,
    mut controller: impl FnMut(usize, f64, &DVector<f64>) -> Result<DVector<f64>>,
    mut plant: impl FnMut(usize, f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![x0.clone()],
        controls: Vec::with_capacity(steps),
    };
    let mut x = x0.clone();
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let u = controller(k, t, &x)?;
        x = plant(k, t, &x, &u);
        traj.controls.push(u);
        traj.states.push(x.clone());
        traj.times.push(t0 + (k + 1) as f64 * dt);
    }
    Ok(traj)
}

/// Euler-Maruyama step of the controlled dynamics,
/// `x + (f + G u) dt + noise_scale * G Q sqrt(dt) w`.
pub fn euler_maruyama_step<D: ControlDynamics>(
    problem: &ControlProblem<D>,
    x: &DVector<f64>,
    t: f64,
    u: &DVector<f64>,
    dt: f64,
    noise_scale: f64,
    rng: &mut impl rand::Rng,
) -> DVector<f64> {
    let drift = problem.dynamics.drift(x, t) + &problem.g * u;
    let mut next = x + drift * dt;
    if noise_scale != 0.0 {
        let w = DVector::from_fn(problem.q.ncols(), |_, _| StandardNormal.sample(rng));
        next += &problem.g * &problem.q * w * (noise_scale * dt.sqrt());
    }
    next
}

/// Receding-horizon path integral control of the problem's own dynamics from
/// `t0` to `t_final`, replanning every `dt`. The plant uses Euler-Maruyama
/// with noise multiplied by `noise_scale`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_closed_loop<D: ControlDynamics>(
    problem: &ControlProblem<D>,
    x0: &DVector<f64>,
    t0: f64,
    t_final: f64,
    dt: f64,
    opts: &PsiOptions,
    noise_scale: f64,
    seed: u64,
) -> Result<Trajectory> {
    let steps = ((t_final - t0) / dt).round() as usize;
    let p = problem.noise_rows().len();
    let mut warm: Option<DVector<f64>> = None;
    run_closed_loop(
        x0,
        t0,
        dt,
        steps,
        |k, t, x| {
            let horizon = Horizon::new(t, t_final, dt);
            let start = warm.as_ref().map(|mu| shift_warm_start(mu, p, horizon.steps));
            let est = optimal_control(
                problem,
                x,
                horizon,
                opts,
                CONTROL_FD_STEP,
                start.as_ref(),
                seed,
                &[rng::tag::SAMPLER, k as u64],
            )?;
            warm = Some(est.center.mu.clone());
            Ok(est.u)
        },
        |k, t, x, u| {
            let mut r = rng::stream(seed, &[rng::tag::PLANT, k as u64]);
            euler_maruyama_step(problem, x, t, u, dt, noise_scale, &mut r)
        },
    )
}
