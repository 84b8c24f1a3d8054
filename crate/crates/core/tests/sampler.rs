use approx::assert_relative_eq;
use implicit_sampling::control::himmelblau_objective;
use implicit_sampling::numerics::{FnObjective, NewtonOptions, Objective};
use implicit_sampling::sampler::{
    draw_ensemble, effective_sample_size, normalize_log_weights, prepare, resample_systematic, sample_quadratic_map,
    sample_random_map, standard_normal_vector, EnsembleOptions, JacobianForm, MapKind,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quartic() -> FnObjective {
    FnObjective::new(2, |x| 0.5 * x.norm_squared() + 0.1 * x[0].powi(4))
        .with_gradient(|x| DVector::from_vec(vec![x[0] + 0.4 * x[0].powi(3), x[1]]))
}

fn map_determinant(f: &FnObjective, xi: &DVector<f64>) -> f64 {
    let prep = prepare(f, &DVector::zeros(2), &NewtonOptions::default()).unwrap();
    let map = |v: &DVector<f64>| sample_random_map(f, &prep, v, JacobianForm::Gradient).unwrap().x;
    let h = 1e-5;
    let cols: Vec<DVector<f64>> = (0..2)
        .map(|k| {
            let (mut p, mut q) = (xi.clone(), xi.clone());
            p[k] += h;
            q[k] -= h;
            (map(&p) - map(&q)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols).determinant().abs()
}

#[test]
fn prepare_examples() {
    let a = DVector::from_vec(vec![1.5, -2.0, 0.5]);
    let a1 = a.clone();
    let f = FnObjective::new(3, move |x| 0.5 * (x - &a1).norm_squared());
    let prep = prepare(&f, &DVector::zeros(3), &NewtonOptions::default()).unwrap();
    assert!((&prep.mu - &a).amax() < 1e-8);
    assert!(prep.phi.abs() < 1e-14);
    assert_relative_eq!(prep.chol.l(), &DMatrix::identity(3, 3), epsilon = 1e-6);

    // Himmelblau scaled by 1/gamma: the minimum reached from (-1, -4) is the
    // lowest value of a local grid around it.
    let gamma = 1e-4;
    let h = himmelblau_objective();
    let scaled = FnObjective::new(2, move |x| h.value(x) / gamma);
    let prep = prepare(&scaled, &DVector::from_vec(vec![-1.0, -4.0]), &NewtonOptions::default()).unwrap();
    let mut grid_min = f64::INFINITY;
    for i in -200..=200 {
        for j in -200..=200 {
            let x = DVector::from_vec(vec![prep.mu[0] + i as f64 * 1e-3, prep.mu[1] + j as f64 * 1e-3]);
            grid_min = grid_min.min(scaled.value(&x));
        }
    }
    assert!(prep.phi <= grid_min + 1e-9);
    assert!(prep.phi < 1e-12);
}

#[test]
fn random_map_on_a_quadratic_is_linear() {
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let (h1, h2, h3) = (h.clone(), h.clone(), h.clone());
    let f = FnObjective::new(2, move |x| 0.5 * x.dot(&(&h1 * x)) + 1.0)
        .with_gradient(move |x| &h2 * x)
        .with_hessian(move |_| h3.clone());
    let prep = prepare(&f, &DVector::from_vec(vec![1.0, 1.0]), &NewtonOptions::default()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut jacobians = Vec::new();
    for _ in 0..20 {
        let xi = standard_normal_vector(2, &mut r);
        let s = sample_random_map(&f, &prep, &xi, JacobianForm::FiniteDifference).unwrap();
        assert_relative_eq!(s.lambda.unwrap(), xi.norm(), max_relative = 1e-7);
        let linear = &prep.mu + prep.chol.solve_lower_transpose(&xi);
        assert!((s.x - linear).amax() < 1e-7);
        jacobians.push(s.log_jacobian);
        let q = sample_quadratic_map(&f, &prep, &xi).unwrap();
        assert!((q.log_weight - (-prep.phi)).abs() < 1e-8);
    }
    let spread = jacobians.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - jacobians.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread < 1e-8);
}

#[test]
fn random_map_jacobian_matches_numerical_determinant() {
    let f = quartic();
    let prep = prepare(&f, &DVector::zeros(2), &NewtonOptions::default()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let xi = standard_normal_vector(2, &mut r);
        let det = map_determinant(&f, &xi);
        for form in [JacobianForm::FiniteDifference, JacobianForm::Gradient] {
            let s = sample_random_map(&f, &prep, &xi, form).unwrap();
            assert!((s.log_jacobian.exp() - det).abs() / det < 1e-4);
        }
    }
}

#[test]
fn normalisation_examples() {
    assert_eq!(normalize_log_weights(&[0.0; 4]).unwrap(), vec![0.25; 4]);
    assert_relative_eq!(effective_sample_size(&[0.25; 4]), 4.0);
    let w = normalize_log_weights(&[0.0, 3f64.ln()]).unwrap();
    assert_relative_eq!(w[0], 0.25, epsilon = 1e-15);
    assert_relative_eq!(w[1], 0.75, epsilon = 1e-15);
    assert_relative_eq!(effective_sample_size(&w), 1.6, epsilon = 1e-14);
    assert!(normalize_log_weights(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_err());
}

#[test]
fn systematic_resampling_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut uniform = resample_systematic(&[0.2; 5], &mut r);
    uniform.sort();
    assert_eq!(uniform, vec![0, 1, 2, 3, 4]);
    assert_eq!(resample_systematic(&[1.0, 0.0, 0.0, 0.0], &mut r), vec![0; 4]);

    // Monte Carlo frequency oracle.
    let trials = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..trials {
        for i in resample_systematic(&[0.5, 0.3, 0.2], &mut r) {
            counts[i] += 1;
        }
    }
    for (c, expected) in counts.iter().zip([1.5, 0.9, 0.6]) {
        assert!((*c as f64 / trials as f64 - expected).abs() < 0.01 * expected);
    }
}

#[test]
fn self_normalised_second_moment() {
    let f = FnObjective::new(1, |x| 0.5 * x[0] * x[0] + 0.05 * x[0].powi(4));
    let g = FnObjective::new(1, |x| 0.5 * x[0] * x[0]);
    let m = 20_000;
    for (objective, map) in [(&g, MapKind::Random), (&g, MapKind::Quadratic), (&f, MapKind::Quadratic)] {
        let prep = prepare(objective, &DVector::from_vec(vec![0.7]), &NewtonOptions::default()).unwrap();
        let opts = EnsembleOptions { map, ..EnsembleOptions::default() };
        let ens = draw_ensemble(objective, &prep, m, &opts, 3, &[]);
        let w = normalize_log_weights(&ens.log_weights()).unwrap();
        let second: f64 = ens.samples.iter().zip(&w).map(|(s, w)| w * s.x[0] * s.x[0]).sum();
        // Reference second moment by quadrature of exp(-F).
        let grid: Vec<f64> = (-4000..=4000).map(|i| i as f64 * 2e-3).collect();
        let dens: Vec<f64> = grid.iter().map(|x| (-objective.value(&DVector::from_vec(vec![*x]))).exp()).collect();
        let z: f64 = dens.iter().sum();
        let exact: f64 = grid.iter().zip(&dens).map(|(x, d)| x * x * d).sum::<f64>() / z;
        assert!((second - exact).abs() < 3.0 * 2f64.sqrt() / (m as f64).sqrt(), "{second} vs {exact}");
    }
}

proptest! {
    #[test]
    fn weights_are_normalised(lw in prop::collection::vec(-30.0f64..30.0, 1..50)) {
        let w = normalize_log_weights(&lw).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        let ess = effective_sample_size(&w);
        prop_assert!(ess >= 1.0 - 1e-12 && ess <= w.len() as f64 + 1e-9);
    }

    #[test]
    fn systematic_copy_counts(raw in prop::collection::vec(0.0f64..1.0, 1..30), seed in 0u64..1000) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 0.0);
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let idx = resample_systematic(&w, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), w.len());
        let m = w.len() as f64;
        for (j, wj) in w.iter().enumerate() {
            let copies = idx.iter().filter(|&&i| i == j).count() as f64;
            prop_assert!(copies >= (m * wj).floor() - 1e-9 && copies <= (m * wj).ceil() + 1e-9);
        }
    }

    #[test]
    fn random_map_residual(x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, c in 0.0f64..0.5) {
        let f = FnObjective::new(2, move |x| 0.5 * x.norm_squared() + c * x[0].powi(4) + 0.2 * x[0] * x[1]);
        let prep = prepare(&f, &DVector::zeros(2), &NewtonOptions::default()).unwrap();
        let xi = DVector::from_vec(vec![x0, x1]);
        prop_assume!(xi.norm() > 1e-3);
        let s = sample_random_map(&f, &prep, &xi, JacobianForm::Gradient).unwrap();
        prop_assert!(s.lambda.unwrap() >= 0.0);
        prop_assert!((f.value(&s.x) - prep.phi - 0.5 * xi.norm_squared()).abs() < 1e-8 * (1.0 + prep.phi.abs()));
    }
}
