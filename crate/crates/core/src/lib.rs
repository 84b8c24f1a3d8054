//! Implicit sampling and its applications.
//!
//! The crate is organised as a stack of modules:
//!
//! * [`numerics`]: Cholesky factors, Newton minimisation, scalar root finding
//!   and finite differences.
//! * [`sampler`]: implicit sampling with the random and the quadratic map,
//!   weights, effective sample size and systematic resampling.
//! * [`pic`]: path integral control, where the desirability function of a
//!   stochastic optimal control problem is estimated by implicit sampling.
//! * [`control`]: concrete control problems (double slit, two-link arm,
//!   stochastic optimisation of the Himmelblau function).
//! * [`vehicle`]: the car-like vehicle and range-bearing laser model.
//! * [`filter`]: the generic state-space model trait shared by the filters,
//!   the per-step objective, and a linear-Gaussian reference model.
//! * [`mcl`]: Monte Carlo localization with implicit or bootstrap proposals.
//! * [`slam`]: landmark SLAM with implicit sampling, FastSLAM and EKF SLAM.
//! * [`harness`]: synthetic data, experiment runners and CSV output.

pub mod control;
pub mod error;
pub mod filter;
pub mod harness;
pub mod mcl;
pub mod numerics;
pub mod pic;
pub mod rng;
pub mod sampler;
pub mod slam;
pub mod vehicle;

pub use error::{Error, Result};
