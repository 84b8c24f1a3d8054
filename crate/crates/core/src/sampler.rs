//! Implicit sampling.
//!
//! Given `F = -log p` (up to a constant), samples are produced by first
//! minimising `F` (minimiser `mu`, minimum `phi`, Hessian factor `L`) and then
//! mapping reference Gaussian samples `xi` into high-probability regions of
//! `p`. Two maps are provided:
//!
//! * the random map `x = mu + lambda L^-T xi / |xi|`, where the scalar `lambda`
//!   solves `F(x) - phi = |xi|^2 / 2`, and
//! * the quadratic map `x = mu + L^-T xi`, exact when `F` is quadratic.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{cholesky, newton_minimize, solve_scalar, CholeskyFactor, Interval, NewtonOptions, Objective};
use crate::rng;

/// Minimisation output needed by both maps.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub mu: DVector<f64>,
    pub phi: f64,
    pub hessian: DMatrix<f64>,
    pub chol: CholeskyFactor,
    pub iterations: usize,
}

impl Prepared {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Log of this sample's contribution to `int exp(-F) dx / (2 pi)^(m/2)`.
    ///
    /// Averaging `exp` of this over the ensemble estimates the normalising
    /// constant of `exp(-F)`, which is what path integral control and the
    /// particle filter weight updates need.
    pub fn log_evidence(&self, s: &ImplicitSample) -> f64 {
        match s.map {
            MapKind::Random => -self.phi + s.log_jacobian,
            MapKind::Quadratic => s.log_weight + s.log_jacobian,
        }
    }
}

/// Minimises `F` and factors the Hessian at the minimiser.
///
/// The Hessian policy of `opts` should keep iterates away from saddles (the
/// default does).
pub fn prepare<O: Objective + ?Sized>(f: &O, x0: &DVector<f64>, opts: &NewtonOptions) -> Result<Prepared> {
    let r = newton_minimize(f, x0, opts);
    if !r.converged {
        return Err(Error::NotConverged {
            iterations: r.iterations,
            grad_norm: r.gradient_norm,
        });
    }
    let hessian = crate::numerics::symmetrize(&f.hessian(&r.x));
    let chol = cholesky(&hessian)?;
    Ok(Prepared {
        mu: r.x,
        phi: r.value,
        hessian,
        chol,
        iterations: r.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    #[default]
    Random,
    Quadratic,
}

/// How `d lambda / d rho` is obtained for the random map Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianForm {
    /// Richardson-extrapolated central differences of `lambda(rho)` with steps
    /// `1e-3 rho` and `5e-4 rho`, each point re-solved to full precision.
    #[default]
    FiniteDifference,
    /// `d lambda / d rho = 1 / (2 grad F(x) . L^-T eta)`.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitSample {
    pub x: DVector<f64>,
    pub xi: DVector<f64>,
    /// Scale along the ray (random map only).
    pub lambda: Option<f64>,
    /// `log |det dx/dxi|`.
    pub log_jacobian: f64,
    /// Unnormalised log weight: the log Jacobian for the random map,
    /// `-phi + F_hat(x) - F(x)` for the quadratic map.
    pub log_weight: f64,
    pub map: MapKind,
}

/// Relative step used for the central differences of `lambda(rho)`.
pub const LAMBDA_RHO_STEP: f64 = 1e-3;

fn ray_lambda<O: Objective + ?Sized>(
    f: &O,
    prep: &Prepared,
    direction: &DVector<f64>,
    half_rho: f64,
    bracket: Interval,
) -> Result<f64> {
    solve_scalar(
        |lambda| f.value(&(&prep.mu + direction * lambda)) - prep.phi,
        half_rho,
        bracket,
        0.0,
    )
}

/// Maps one reference sample through the random map.
pub fn sample_random_map<O: Objective + ?Sized>(
    f: &O,
    prep: &Prepared,
    xi: &DVector<f64>,
    form: JacobianForm,
) -> Result<ImplicitSample> {
    let m = prep.dim();
    if xi.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: xi.len(),
        });
    }
    let rho = xi.norm_squared();
    if !(rho > 0.0) {
        return Err(Error::NoBracket { lo: 0.0, hi: 0.0 });
    }
    let eta = xi / rho.sqrt();
    let direction = prep.chol.solve_lower_transpose(&eta);
    let guess = 2.0 * rho.sqrt();
    let lambda = ray_lambda(f, prep, &direction, 0.5 * rho, Interval::new(0.0, guess)?)?;
    let x = &prep.mu + &direction * lambda;
    let fx = f.value(&x);
    let residual = (fx - prep.phi - 0.5 * rho).abs();
    let tolerance = 1e-8 * (1.0 + prep.phi.abs());
    if !(residual < tolerance) {
        return Err(Error::ScalarResidual { residual, tolerance });
    }

    let dlambda_drho = match form {
        JacobianForm::FiniteDifference => {
            let central = |h: f64| -> Result<f64> {
                let upper = ray_lambda(f, prep, &direction, 0.5 * (rho + h), Interval::new(lambda, 2.0 * lambda)?)?;
                let lower = ray_lambda(f, prep, &direction, 0.5 * (rho - h), Interval::new(0.0, lambda)?)?;
                Ok((upper - lower) / (2.0 * h))
            };
            let h = LAMBDA_RHO_STEP * rho;
            let coarse = central(h)?;
            let fine = central(0.5 * h)?;
            (4.0 * fine - coarse) / 3.0
        }
        JacobianForm::Gradient => 1.0 / (2.0 * f.gradient(&x).dot(&direction)),
    };

    let mf = m as f64;
    let log_jacobian = (2.0 * rho.sqrt()).ln() + 0.5 * (1.0 - mf) * rho.ln() + (mf - 1.0) * lambda.ln()
        + dlambda_drho.abs().ln()
        - prep.chol.log_det_l();
    if !log_jacobian.is_finite() {
        return Err(Error::ScalarResidual {
            residual: f64::NAN,
            tolerance,
        });
    }
    Ok(ImplicitSample {
        x,
        xi: xi.clone(),
        lambda: Some(lambda),
        log_jacobian,
        log_weight: log_jacobian,
        map: MapKind::Random,
    })
}

/// Maps one reference sample through the quadratic map.
pub fn sample_quadratic_map<O: Objective + ?Sized>(
    f: &O,
    prep: &Prepared,
    xi: &DVector<f64>,
) -> Result<ImplicitSample> {
    let m = prep.dim();
    if xi.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: xi.len(),
        });
    }
    let x = &prep.mu + prep.chol.solve_lower_transpose(xi);
    let f_hat = prep.phi + 0.5 * xi.norm_squared();
    let log_weight = -prep.phi + f_hat - f.value(&x);
    Ok(ImplicitSample {
        x,
        xi: xi.clone(),
        lambda: None,
        log_jacobian: -prep.chol.log_det_l(),
        log_weight,
        map: MapKind::Quadratic,
    })
}

pub fn sample_with<O: Objective + ?Sized>(
    f: &O,
    prep: &Prepared,
    xi: &DVector<f64>,
    map: MapKind,
    form: JacobianForm,
) -> Result<ImplicitSample> {
    match map {
        MapKind::Random => sample_random_map(f, prep, xi, form),
        MapKind::Quadratic => sample_quadratic_map(f, prep, xi),
    }
}

pub fn standard_normal_vector(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub map: MapKind,
    pub form: JacobianForm,
    /// Fresh reference samples tried after a failed random-map solve.
    pub max_redraws: usize,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            map: MapKind::Random,
            form: JacobianForm::FiniteDifference,
            max_redraws: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DrawnEnsemble {
    /// Samples in draw order. Samples whose map failed on every attempt carry
    /// `log_weight = log_jacobian = -inf` and `x = mu`.
    pub samples: Vec<ImplicitSample>,
    pub redraws: usize,
    pub failures: usize,
}

impl DrawnEnsemble {
    pub fn log_weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.log_weight).collect()
    }

    /// Per-sample evidence terms, see [`Prepared::log_evidence`].
    pub fn log_evidences(&self, prep: &Prepared) -> Vec<f64> {
        self.samples.iter().map(|s| prep.log_evidence(s)).collect()
    }
}

/// Draws `count` samples. Sample `j` uses the stream `(seed, path..., j)`, so
/// the ensemble does not depend on the number of worker threads, and two calls
/// with the same seed and path use common random numbers.
pub fn draw_ensemble<O: Objective + Sync + ?Sized>(
    f: &O,
    prep: &Prepared,
    count: usize,
    opts: &EnsembleOptions,
    seed: u64,
    path: &[u64],
) -> DrawnEnsemble {
    let m = prep.dim();
    let draw_one = |j: usize| -> (ImplicitSample, usize, bool) {
        let mut full_path = path.to_vec();
        full_path.push(j as u64);
        let mut r = rng::stream(seed, &full_path);
        let mut last_xi = DVector::zeros(m);
        for attempt in 0..=opts.max_redraws {
            let xi = standard_normal_vector(m, &mut r);
            match sample_with(f, prep, &xi, opts.map, opts.form) {
                Ok(s) => return (s, attempt, false),
                Err(_) => last_xi = xi,
            }
        }
        let failed = ImplicitSample {
            x: prep.mu.clone(),
            xi: last_xi,
            lambda: None,
            log_jacobian: f64::NEG_INFINITY,
            log_weight: f64::NEG_INFINITY,
            map: opts.map,
        };
        (failed, opts.max_redraws, true)
    };
    let results: Vec<_> = (0..count).into_par_iter().map(draw_one).collect();
    let redraws = results.iter().map(|r| r.1).sum();
    let failures = results.iter().filter(|r| r.2).count();
    DrawnEnsemble {
        samples: results.into_iter().map(|r| r.0).collect(),
        redraws,
        failures,
    }
}

/// Normalises log weights with the usual max shift.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let unnorm: Vec<f64> = log_weights
        .iter()
        .map(|lw| if lw.is_nan() { 0.0 } else { (lw - max).exp() })
        .collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// `log((1/M) sum exp(a_j))`, computed stably.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// `1 / sum w_j^2` for normalised weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform offset, `M` evenly spaced pointers.
pub fn resample_systematic(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let m = weights.len();
    if m == 0 {
        return Vec::new();
    }
    let step = 1.0 / m as f64;
    let offset: f64 = rng.random::<f64>() * step;
    let mut indices = Vec::with_capacity(m);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..m {
        let u = offset + k as f64 * step;
        while u > cumulative && i + 1 < m {
            i += 1;
            cumulative += weights[i];
        }
        indices.push(i);
    }
    indices
}

/// Weighted mean of sample positions.
pub fn weighted_mean(samples: &[ImplicitSample], weights: &[f64]) -> DVector<f64> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    samples
        .iter()
        .zip(weights)
        .fold(DVector::zeros(dim), |acc, (s, w)| acc + &s.x * *w)
}
