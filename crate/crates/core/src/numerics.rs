//! Dense linear algebra helpers, Newton minimisation, scalar root finding and
//! finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative step for central-difference gradients, roughly `eps^(1/3)`.
pub const GRADIENT_STEP: f64 = 6e-6;
/// Relative step for value-only central-difference Hessians, roughly `eps^(1/4)`.
pub const HESSIAN_STEP: f64 = 1e-4;

/// Closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Self { lo, hi })
        } else {
            Err(Error::InvalidInterval { lo, hi })
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Returns whichever end of the interval is closer to `x`.
    pub fn nearest_edge(&self, x: f64) -> f64 {
        if (x - self.lo).abs() <= (x - self.hi).abs() {
            self.lo
        } else {
            self.hi
        }
    }
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Lower-triangular Cholesky factor `L` with `H = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
}

/// Factors a symmetric positive definite matrix.
///
/// Symmetry is checked against `1e-10 * ||H||_inf`; the first non-positive
/// pivot is reported in the error.
pub fn cholesky(h: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: h.ncols(),
        });
    }
    let tolerance = 1e-10 * inf_norm(h).max(f64::MIN_POSITIVE);
    let mut asymmetry: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            asymmetry = asymmetry.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    if asymmetry > tolerance || asymmetry.is_nan() {
        return Err(Error::NotSymmetric {
            asymmetry,
            tolerance,
        });
    }

    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            // use the lower triangle only
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(CholeskyFactor { l })
}

impl CholeskyFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Solves `L^T x = b`.
    pub fn solve_lower_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `H x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_lower_transpose(&self.solve_lower(b))
    }

    /// `log det L`, i.e. half of `log det H`.
    pub fn log_det_l(&self) -> f64 {
        self.l.diagonal().iter().map(|d| d.ln()).sum()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        symmetrize(&inv)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// A twice differentiable scalar function of a vector.
///
/// Gradient and Hessian default to central finite differences.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>) -> f64;

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        finite_diff_gradient(|y| self.value(y), x, GRADIENT_STEP)
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        finite_diff_hessian(|y| self.value(y), x, HESSIAN_STEP)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (**self).hessian(x)
    }
}

type ValueFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradientFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type HessianFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Objective assembled from closures.
pub struct FnObjective {
    dim: usize,
    value: ValueFn,
    gradient: Option<GradientFn>,
    hessian: Option<HessianFn>,
}

impl FnObjective {
    pub fn new(dim: usize, value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            dim,
            value: Box::new(value),
            gradient: None,
            hessian: None,
        }
    }

    pub fn with_gradient(
        mut self,
        g: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Box::new(g));
        self
    }

    pub fn with_hessian(
        mut self,
        h: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Box::new(h));
        self
    }
}

impl Objective for FnObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => finite_diff_gradient(|y| self.value(y), x, GRADIENT_STEP),
        }
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match (&self.hessian, &self.gradient) {
            (Some(h), _) => h(x),
            (None, Some(_)) => hessian_from_gradient(|y| self.gradient(y), x, GRADIENT_STEP),
            (None, None) => finite_diff_hessian(|y| self.value(y), x, HESSIAN_STEP),
        }
    }
}

/// Central-difference gradient with per-coordinate step `h * (1 + |x_i|)`.
pub fn finite_diff_gradient(
    f: impl Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut y = x.clone();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        y[i] = x[i] + step;
        let fp = f(&y);
        y[i] = x[i] - step;
        let fm = f(&y);
        y[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Central-difference Hessian from function values only.
pub fn finite_diff_hessian(
    f: impl Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let steps: Vec<f64> = x.iter().map(|v| h * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(n, n);
    let mut y = x.clone();
    for i in 0..n {
        y[i] = x[i] + steps[i];
        let fp = f(&y);
        y[i] = x[i] - steps[i];
        let fm = f(&y);
        y[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                y[i] = x[i] + si * steps[i];
                y[j] = x[j] + sj * steps[j];
                let v = f(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * steps[i] * steps[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Central-difference Jacobian of a vector function; row `i` is output `i`.
pub fn finite_diff_jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let mut y = x.clone();
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        y[i] = x[i] + step;
        let fp = f(&y);
        y[i] = x[i] - step;
        let fm = f(&y);
        y[i] = x[i];
        columns.push((fp - fm) / (2.0 * step));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, x.len(), |r, c| columns[c][r])
}

/// Symmetrised central-difference Jacobian of a gradient.
pub fn hessian_from_gradient(
    g: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    symmetrize(&finite_diff_jacobian(g, x, h))
}

/// How the Newton step treats the Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianPolicy {
    /// Solve with the Hessian as it is (LU); fall back to steepest descent when
    /// the Newton direction is not a descent direction. Converges to whichever
    /// stationary point the plain Newton iteration finds, saddles included.
    AsIs,
    /// Add a multiple of the identity until the Hessian is positive definite,
    /// so every step is a descent direction and iterates head for minima.
    #[default]
    ForcePositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub policy: HessianPolicy,
    /// Sufficient decrease constant of the backtracking line search.
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 100,
            policy: HessianPolicy::ForcePositiveDefinite,
            armijo: 1e-4,
            max_halvings: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

fn newton_direction(
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    policy: HessianPolicy,
) -> DVector<f64> {
    let steepest = || -g.clone();
    match policy {
        HessianPolicy::AsIs => match h.clone().lu().solve(&(-g)) {
            Some(d) if d.iter().all(|v| v.is_finite()) && g.dot(&d) < 0.0 => d,
            _ => steepest(),
        },
        HessianPolicy::ForcePositiveDefinite => {
            let h = symmetrize(h);
            let n = h.nrows();
            let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            let beta = 1e-3 * scale;
            let min_diag = h.diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
            let mut tau = if min_diag > 0.0 { 0.0 } else { beta - min_diag };
            for _ in 0..200 {
                let shifted = &h + DMatrix::identity(n, n) * tau;
                if let Ok(c) = cholesky(&shifted) {
                    let d = c.solve(&(-g));
                    if d.iter().all(|v| v.is_finite()) {
                        return d;
                    }
                }
                tau = (2.0 * tau).max(beta);
            }
            steepest()
        }
    }
}

/// Damped Newton minimisation with Armijo backtracking (constant `opts.armijo`,
/// step halving).
///
/// Stops when the gradient norm drops below `opts.grad_tol`, or when the
/// predicted decrease of a full step falls below the rounding level of the
/// objective value (further iterations cannot make progress).
pub fn newton_minimize<O: Objective + ?Sized>(
    f: &O,
    x0: &DVector<f64>,
    opts: &NewtonOptions,
) -> MinimizeResult {
    let mut x = x0.clone();
    let mut fx = f.value(&x);
    let mut trace = vec![fx];
    let mut g = f.gradient(&x);
    let mut iterations = 0;
    loop {
        let gnorm = g.norm();
        if gnorm <= opts.grad_tol {
            return MinimizeResult {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                converged: true,
                trace,
            };
        }
        if iterations >= opts.max_iter || !fx.is_finite() {
            return MinimizeResult {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                converged: false,
                trace,
            };
        }
        let h = f.hessian(&x);
        let d = newton_direction(&g, &h, opts.policy);
        let slope = g.dot(&d);
        if -slope <= 8.0 * f64::EPSILON * (1.0 + fx.abs()) {
            return MinimizeResult {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                converged: true,
                trace,
            };
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &x + &d * alpha;
            let ft = f.value(&trial);
            if ft.is_finite() && ft <= fx + opts.armijo * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            // No representable decrease: stationary to working precision.
            Some((_, fxn)) if fxn >= fx => {
                return MinimizeResult {
                    x,
                    value: fx,
                    gradient_norm: gnorm,
                    iterations,
                    converged: true,
                    trace,
                };
            }
            Some((xn, fxn)) => {
                x = xn;
                fx = fxn;
                g = f.gradient(&x);
                trace.push(fx);
                iterations += 1;
            }
            None => {
                return MinimizeResult {
                    x,
                    value: fx,
                    gradient_norm: gnorm,
                    iterations,
                    converged: false,
                    trace,
                };
            }
        }
    }
}

/// The objective restricted to the hyperplane `x[index] = fixed`.
struct Restricted<'a, O: ?Sized> {
    inner: &'a O,
    index: usize,
    fixed: f64,
}

impl<O: Objective + ?Sized> Restricted<'_, O> {
    fn expand(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.dim();
        DVector::from_fn(n, |i, _| match i.cmp(&self.index) {
            std::cmp::Ordering::Less => y[i],
            std::cmp::Ordering::Equal => self.fixed,
            std::cmp::Ordering::Greater => y[i - 1],
        })
    }
}

impl<O: Objective + ?Sized> Objective for Restricted<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim() - 1
    }
    fn value(&self, y: &DVector<f64>) -> f64 {
        self.inner.value(&self.expand(y))
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        self.inner.gradient(&self.expand(y)).remove_row(self.index)
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        self.inner
            .hessian(&self.expand(y))
            .remove_row(self.index)
            .remove_column(self.index)
    }
}

/// Minimises `f` subject to `x[index]` lying in `window`.
///
/// The unconstrained minimiser is computed first; if its `index` coordinate is
/// outside the window that coordinate is clamped to the nearer edge and the
/// remaining coordinates are minimised again. This is exact for convex `f`.
pub fn constrained_quadratic_minimize<O: Objective + ?Sized>(
    f: &O,
    x0: &DVector<f64>,
    index: usize,
    window: Interval,
    opts: &NewtonOptions,
) -> Result<MinimizeResult> {
    if index >= f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            found: index,
        });
    }
    let free = newton_minimize(f, x0, opts);
    if !free.converged {
        return Err(Error::NotConverged {
            iterations: free.iterations,
            grad_norm: free.gradient_norm,
        });
    }
    if window.contains(free.x[index]) {
        return Ok(free);
    }
    let restricted = Restricted {
        inner: f,
        index,
        fixed: window.nearest_edge(free.x[index]),
    };
    let y0 = free.x.clone().remove_row(index);
    let sub = newton_minimize(&restricted, &y0, opts);
    if !sub.converged {
        return Err(Error::NotConverged {
            iterations: sub.iterations,
            grad_norm: sub.gradient_norm,
        });
    }
    let x = restricted.expand(&sub.x);
    Ok(MinimizeResult {
        x,
        value: sub.value,
        gradient_norm: sub.gradient_norm,
        iterations: free.iterations + sub.iterations,
        converged: true,
        trace: sub.trace,
    })
}

/// Solves `g(x) = target` on a bracket with a safeguarded secant iteration
/// (bisection whenever the secant step leaves the bracket or stalls).
///
/// If the bracket does not straddle the target its upper end is pushed out
/// geometrically, `hi <- lo + 2 (hi - lo)`, up to 60 times. The iteration stops
/// when `|g(x) - target| <= tol` or when the bracket has collapsed to adjacent
/// floating-point numbers; pass `tol = 0` for full precision.
pub fn solve_scalar(
    mut g: impl FnMut(f64) -> f64,
    target: f64,
    bracket: Interval,
    tol: f64,
) -> Result<f64> {
    let mut a = bracket.lo;
    let mut b = bracket.hi;
    let mut fa = g(a) - target;
    let mut fb = g(b) - target;
    if fa.is_nan() {
        return Err(Error::NoBracket { lo: a, hi: b });
    }
    let mut expansions = 0;
    while fa.signum() == fb.signum() && fa != 0.0 && fb != 0.0 {
        if expansions == 60 || fb.is_nan() {
            return Err(Error::NoBracket { lo: a, hi: b });
        }
        let lo = a;
        a = b;
        fa = fb;
        b = lo + 2.0 * (b - lo);
        fb = g(b) - target;
        expansions += 1;
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    // keep the invariant fa < 0 < fb
    if fa > 0.0 {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let (mut best, mut best_res) = if fa.abs() < fb.abs() { (a, fa.abs()) } else { (b, fb.abs()) };
    let mut last_width = (b - a).abs();
    let mut use_bisection = false;
    for _ in 0..400 {
        if best_res <= tol {
            return Ok(best);
        }
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            return Ok(best);
        }
        let secant = b - fb * (b - a) / (fb - fa);
        let lo = a.min(b);
        let hi = a.max(b);
        let x = if use_bisection || !(secant > lo && secant < hi) {
            mid
        } else {
            secant
        };
        let fx = g(x) - target;
        if fx.is_nan() {
            return Err(Error::ScalarResidual {
                residual: f64::NAN,
                tolerance: tol,
            });
        }
        if fx.abs() < best_res {
            best = x;
            best_res = fx.abs();
        }
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
        let width = (b - a).abs();
        // force a bisection when the bracket failed to halve
        use_bisection = width > 0.5 * last_width;
        last_width = width;
    }
    Ok(best)
}
