mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use common::{kalman_oracle, linear_world, run_ekf_slam};
use implicit_sampling::filter::{LinearSurrogate, StateSpaceModel, StepObjective};
use implicit_sampling::mcl::{trajectory_error, LandmarkMap, MclConfig, MclFilter, Measurement, Proposal};
use implicit_sampling::numerics::{NewtonOptions, Objective};
use implicit_sampling::sampler::{prepare, sample_quadratic_map, MapKind};
use implicit_sampling::slam::{
    associate, init_feature, new_feature_log_likelihood, synthetic_scan, Association, AssociationMode, EkfSlam,
    FeatureEstimate, Observation, ParticleSlam, SlamConfig, SlamMethod, DEFAULT_GATE, SCAN_RADIUS,
};
use implicit_sampling::vehicle::{
    measure_exact, process_noise_cov, wrap_angle, AxleControl, ControlInput, VehicleModel, VehicleParams, VehiclePose,
};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn pose3(x: f64, y: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(vec![x, y, b])
}

fn process_cov() -> DMatrix<f64> {
    let c = process_noise_cov(&VehiclePose::new(0.0, 0.0, 0.3), &AxleControl { v_c: 3.0, alpha: 0.1 }, &VehicleParams::default());
    DMatrix::from_column_slice(3, 3, c.as_slice())
}

/// Gaussian negative log density of `r` with covariance `cov`, without the
/// normalising constant.
fn neg_log_gauss(r: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    0.5 * r.dot(&(cov.clone().try_inverse().unwrap() * r))
}

#[test]
fn step_objective_examples() {
    let model = VehicleModel::default();
    let cov = process_cov();
    let predicted = pose3(1.0, 2.0, 0.3);
    let obj = StepObjective::new(&model, predicted.clone(), &cov).unwrap();
    let prep = prepare(&obj, &obj.initial_guess(), &NewtonOptions::default()).unwrap();
    assert!((&prep.mu - &predicted).amax() < 1e-12);
    assert!(prep.phi.abs() < 1e-20);

    // Nearly noiseless measurements of two landmarks pin the pose.
    let sharp = VehicleModel::new(VehicleParams { range_std: 1e-6, bearing_std: 1e-7, ..VehicleParams::default() });
    let truth = VehiclePose::new(1.2, 1.9, 0.32);
    let mut obj = StepObjective::new(&sharp, predicted.clone(), &cov).unwrap();
    for m in [Vector2::new(8.0, 5.0), Vector2::new(-3.0, 9.0)] {
        obj = obj.with_measurement(m, measure_exact(&truth, &m).unwrap().to_vector());
    }
    let prep = prepare(&obj, &obj.initial_guess(), &NewtonOptions::default()).unwrap();
    assert!((&prep.mu - truth.to_vector()).amax() < 1e-5, "{}", prep.mu);
}

#[test]
fn step_objective_is_the_negative_log_density_product() {
    let params = VehicleParams::default();
    let model = VehicleModel::new(params);
    let cov = process_cov();
    let predicted = pose3(0.5, -1.0, 2.9);
    let landmarks = [Vector2::new(6.0, 3.0), Vector2::new(-2.0, 4.0)];
    let zs = [Vector2::new(6.1, 0.4), Vector2::new(5.0, -2.9)];
    let mut obj = StepObjective::new(&model, predicted.clone(), &cov).unwrap();
    for (m, z) in landmarks.iter().zip(&zs) {
        obj = obj.with_measurement(*m, *z);
    }
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![params.range_std.powi(2), params.bearing_std.powi(2)]));
    let oracle = |x: &DVector<f64>| {
        let pose = VehiclePose { x: x[0], y: x[1], beta: x[2] };
        let d = DVector::from_vec(vec![x[0] - predicted[0], x[1] - predicted[1], wrap_angle(x[2] - predicted[2])]);
        let mut total = neg_log_gauss(&d, &cov);
        for (m, z) in landmarks.iter().zip(&zs) {
            let h = measure_exact(&pose, m).unwrap();
            let e = DVector::from_vec(vec![h.range - z[0], wrap_angle(h.bearing - z[1])]);
            total += neg_log_gauss(&e, &r);
        }
        total
    };
    let a = pose3(0.52, -0.97, 2.95);
    let b = pose3(0.47, -1.02, -3.1);
    let diff = obj.value(&a) - obj.value(&b);
    let expected = oracle(&a) - oracle(&b);
    assert!((diff - expected).abs() < 1e-12 * expected.abs().max(1.0), "{diff} vs {expected}");
}

#[test]
fn known_landmark_limit_of_the_free_landmark_objective() {
    let model = VehicleModel::default();
    let cov = process_cov();
    let predicted = pose3(0.0, 0.0, 0.2);
    let m = Vector2::new(7.0, 4.0);
    let z = measure_exact(&VehiclePose::new(0.05, -0.03, 0.21), &m).unwrap().to_vector();
    let known = StepObjective::new(&model, predicted.clone(), &cov).unwrap().with_measurement(m, z);
    let free = StepObjective::new(&model, predicted, &cov)
        .unwrap()
        .with_free_landmark(m, &(Matrix2::identity() * 1e-10), z)
        .unwrap();
    let opts = NewtonOptions::default();
    let pk = prepare(&known, &known.initial_guess(), &opts).unwrap();
    let pf = prepare(&free, &free.initial_guess(), &opts).unwrap();
    assert!((pk.mu.rows(0, 3) - pf.mu.rows(0, 3)).amax() < 1e-6);
    let sk = sample_quadratic_map(&known, &pk, &DVector::zeros(3)).unwrap();
    let sf = sample_quadratic_map(&free, &pf, &DVector::zeros(5)).unwrap();
    let (lk, lf) = (known.log_marginal(&pk, &sk), free.log_marginal(&pf, &sf));
    assert!((lk - lf).abs() < 1e-3, "{lk} vs {lf}");
}

#[test]
fn circular_mean_of_headings() {
    let model = VehicleModel::default();
    let poses = [pose3(0.0, 0.0, PI - 0.1), pose3(2.0, 4.0, -(PI - 0.1))];
    let mean = model.mean_pose(&poses, &[0.5, 0.5]);
    assert!((mean[2].abs() - PI).abs() < 1e-12);
    assert_eq!((mean[0], mean[1]), (1.0, 2.0));
    assert_eq!(model.mean_pose(&poses[..1], &[1.0]), poses[0]);
    let truth: Vec<DVector<f64>> = (0..5).map(|i| pose3(i as f64, 1.0, 0.0)).collect();
    assert_eq!(trajectory_error(&truth, &truth), 0.0);
}

#[test]
fn implicit_proposal_is_exact_on_the_linear_model() {
    let model = LinearSurrogate::default();
    let map = LandmarkMap::new([(0, Vector2::new(4.0, 2.0))]).unwrap();
    let m = 20_000;
    let config = MclConfig { particles: m, proposal: Proposal::Implicit, map: MapKind::Quadratic, seed: 12, ..MclConfig::default() };
    let x0 = DVector::from_vec(vec![0.5, -0.5]);
    let u = Vector2::new(0.4, 0.2);
    let mut filter = MclFilter::new(&model, &map, config, &x0, None, &u).unwrap();
    let z = Vector2::new(3.2, 2.1);
    filter.step(&u, &[Measurement { id: 0, z }]).unwrap();
    // Every particle shares the prior, so the optimal proposal gives equal weights.
    assert!((filter.effective_sample_size() - m as f64).abs() < 1e-6 * m as f64);

    let mut kf = common::JointKalman::new(Vector2::new(0.5, -0.5), Matrix2::zeros());
    kf.predict(&u, &model.process_cov);
    kf.update_known(&Vector2::new(4.0, 2.0), &z, &model.sensor_cov);
    let poses: Vec<&DVector<f64>> = filter.particles().iter().map(|p| &p.pose).collect();
    let mean = poses.iter().fold(DVector::zeros(2), |a, p| a + *p) / m as f64;
    for k in 0..2 {
        let var = kf.cov[(k, k)];
        assert!((mean[k] - kf.mean[k]).abs() < 3.0 * (var / m as f64).sqrt());
        let sample_var = poses.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((sample_var / var - 1.0).abs() < 4.0 * (2.0 / m as f64).sqrt());
    }
}

#[test]
fn weights_stay_normalised_over_a_run() {
    let model = LinearSurrogate::default();
    let world = linear_world(&model.process_cov, &model.sensor_cov, 10, 21);
    let map = LandmarkMap::new(world.landmarks.iter().copied()).unwrap();
    let x0 = DVector::from_column_slice(world.x0.as_slice());
    let p0 = DMatrix::identity(2, 2) * 0.05;
    for proposal in [Proposal::Implicit, Proposal::Standard] {
        let config = MclConfig { particles: 200, proposal, seed: 3, ..MclConfig::default() };
        let mut filter = MclFilter::new(&model, &map, config, &x0, Some(&p0), &world.controls[0]).unwrap();
        for (k, (u, (id, z))) in world.controls.iter().zip(&world.observations).enumerate() {
            let data = if k % 3 == 2 { vec![] } else { vec![Measurement { id: *id, z: *z }] };
            filter.step(u, &data).unwrap();
            let w = filter.weights();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let ess = filter.effective_sample_size();
            assert!((1.0 - 1e-9..=200.0 + 1e-9).contains(&ess));
        }
    }
}

#[test]
fn slam_without_a_scan_only_predicts() {
    let model = LinearSurrogate::default();
    let x0 = DVector::from_vec(vec![1.0, 2.0]);
    let u = Vector2::new(0.3, -0.1);
    let config = SlamConfig { particles: 5, method: SlamMethod::Implicit, ..SlamConfig::default() };
    let mut slam = ParticleSlam::new(&model, config, &x0, None, &u).unwrap();
    slam.step(&u, None).unwrap();
    for p in slam.particles() {
        assert_eq!(p.pose, DVector::from_vec(vec![1.3, 1.9]));
        assert!(p.features.is_empty());
    }
    let config = SlamConfig { particles: 500, method: SlamMethod::FastSlam, ..SlamConfig::default() };
    let mut fast = ParticleSlam::new(&model, config, &x0, None, &u).unwrap();
    fast.step(&u, None).unwrap();
    let est = fast.estimate();
    assert!((est[0] - 1.3).abs() < 3.0 * (0.04f64 / 500.0).sqrt());
    assert!((est[1] - 1.9).abs() < 3.0 * (0.09f64 / 500.0).sqrt());

    let mut ekf = EkfSlam::new(&model, &x0, &(DMatrix::identity(2, 2) * 0.1), DEFAULT_GATE, AssociationMode::Known);
    let before = ekf.covariance().trace();
    ekf.step(&u, None).unwrap();
    assert!(ekf.covariance().trace() > before);
}

#[test]
fn slam_weights_stay_normalised_with_new_features() {
    let model = LinearSurrogate::default();
    let world = linear_world(&model.process_cov, &model.sensor_cov, 8, 4);
    let x0 = DVector::from_column_slice(world.x0.as_slice());
    for method in [SlamMethod::Implicit, SlamMethod::FastSlam] {
        let config = SlamConfig { particles: 100, method, seed: 2, ..SlamConfig::default() };
        let mut slam = ParticleSlam::new(&model, config, &x0, None, &world.controls[0]).unwrap();
        for (u, (_, z)) in world.controls.iter().zip(&world.observations) {
            slam.step(u, Some(&Observation { z: *z, id: None })).unwrap();
            let w = slam.weights();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        // Two landmarks, well separated: maximum likelihood keeps two features.
        let counts: Vec<usize> = slam.particles().iter().map(|p| p.features.len()).collect();
        let twos = counts.iter().filter(|&&c| c == 2).count();
        assert!(twos >= 90, "{method:?}: {counts:?}");
    }
}

#[test]
fn ekf_slam_is_the_kalman_filter_on_the_linear_model() {
    let model = LinearSurrogate::default();
    let world = linear_world(&model.process_cov, &model.sensor_cov, 6, 3);
    let p0 = Matrix2::identity() * 0.02;
    let ekf = run_ekf_slam(&model, &world, &p0);
    let kf = kalman_oracle(&model, &world, &p0, false);
    assert!((ekf.pose - kf.pose()).amax() < 1e-9);
    for (est, (id, _)) in ekf.landmarks.iter().zip(&world.landmarks) {
        assert!((est - kf.landmark(*id)).amax() < 1e-9);
    }
}

#[test]
fn scan_visibility_and_noise() {
    let params = VehicleParams::default();
    let pose = VehiclePose::new(0.0, 0.0, FRAC_PI_2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(synthetic_scan(&pose, &[(0, Vector2::new(0.0, 20.0))], &params, &mut rng).unwrap().is_none());
    assert!(synthetic_scan(&pose, &[(0, Vector2::new(0.0, -5.0))], &params, &mut rng).unwrap().is_none());
    assert!(synthetic_scan(&pose, &[(0, Vector2::new(0.0, SCAN_RADIUS + 0.1))], &params, &mut rng).unwrap().is_none());

    let landmark = Vector2::new(2.0, 6.0);
    let exact = measure_exact(&pose, &landmark).unwrap();
    let n = 10_000;
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        let (z, id) = synthetic_scan(&pose, &[(7, landmark)], &params, &mut rng).unwrap().unwrap();
        assert_eq!(id, 7);
        res.push([z.range - exact.range, wrap_angle(z.bearing - exact.bearing)]);
    }
    for (k, sd) in [params.range_std, params.bearing_std].into_iter().enumerate() {
        let mean = res.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let var = res.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * sd / (n as f64).sqrt());
        assert!((var / (sd * sd) - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }
}

#[test]
fn association_matches_exhaustive_likelihood() {
    let model = VehicleModel::default();
    let params = VehicleParams::default();
    let pose = VehiclePose::new(0.0, 0.0, FRAC_PI_2);
    let pv = pose.to_vector();
    let cov = Matrix2::identity() * 0.01;
    let features = [
        FeatureEstimate { id: 0, mean: Vector2::new(-1.0, 6.0), cov },
        FeatureEstimate { id: 1, mean: Vector2::new(1.0, 6.0), cov },
    ];
    assert_eq!(associate(&model, &pv, None, &[], &Vector2::new(5.0, 0.0), DEFAULT_GATE), Association::New { d2: f64::INFINITY });
    let exact = measure_exact(&pose, &features[1].mean).unwrap().to_vector();
    match associate(&model, &pv, None, &features, &exact, DEFAULT_GATE) {
        Association::Known { index: 1, d2 } => assert!(d2 < 1e-20),
        a => panic!("{a:?}"),
    }

    // Oracle: Gaussian likelihood of each feature with the observation
    // Jacobian taken by central differences.
    let log_lik = |f: &FeatureEstimate, z: &Vector2<f64>| {
        let h = measure_exact(&pose, &f.mean).unwrap().to_vector();
        let step = 1e-6;
        let mut j = Matrix2::zeros();
        for k in 0..2 {
            let mut plus = f.mean;
            let mut minus = f.mean;
            plus[k] += step;
            minus[k] -= step;
            let d = measure_exact(&pose, &plus).unwrap().to_vector() - measure_exact(&pose, &minus).unwrap().to_vector();
            j.set_column(k, &(d / (2.0 * step)));
        }
        let s = j * f.cov * j.transpose() + params.sensor_cov();
        let nu = Vector2::new(z[0] - h[0], wrap_angle(z[1] - h[1]));
        -0.5 * nu.dot(&(s.try_inverse().unwrap() * nu)) - 0.5 * s.determinant().ln()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let w: f64 = StandardNormal.sample(&mut rng);
        let x = 0.8 * w;
        let z = measure_exact(&pose, &Vector2::new(x, 6.0)).unwrap().to_vector();
        let best = if log_lik(&features[0], &z) > log_lik(&features[1], &z) { 0 } else { 1 };
        match associate(&model, &pv, None, &features, &z, f64::INFINITY) {
            Association::Known { index, .. } => assert_eq!(index, best, "x = {x}"),
            a => panic!("{a:?}"),
        }
    }
}

#[test]
fn feature_initialisation_examples() {
    let model = VehicleModel::default();
    let f = init_feature(&model, &pose3(0.0, 0.0, FRAC_PI_2), &Vector2::new(5.0, FRAC_PI_2), 4).unwrap();
    assert_eq!(f.id, 4);
    assert!((f.mean - Vector2::new(0.0, 5.0)).amax() < 1e-14);
    assert!(new_feature_log_likelihood() < 0.0);
    assert!((new_feature_log_likelihood() + (15.0 * PI).ln()).abs() < 1e-15);
}

#[test]
fn ekf_slam_rejects_nothing_on_first_sight() {
    let model = LinearSurrogate::default();
    let x0 = DVector::from_vec(vec![0.0, 0.0]);
    let mut ekf = EkfSlam::new(&model, &x0, &(DMatrix::identity(2, 2) * 1e-3), DEFAULT_GATE, AssociationMode::MaximumLikelihood);
    ekf.step(&Vector2::new(0.1, 0.0), Some(&Observation { z: Vector2::new(3.0, 1.0), id: None })).unwrap();
    assert_eq!(ekf.feature_count(), 1);
    assert!((ekf.feature(0).mean - Vector2::new(3.1, 1.0)).amax() < 1e-12);
}

proptest! {
    #[test]
    fn initialised_feature_round_trips(
        x in -10.0f64..10.0, y in -10.0f64..10.0, beta in -PI..PI,
        range in 0.5f64..15.0, bearing in 0.0f64..PI,
    ) {
        let model = VehicleModel::default();
        let pose = pose3(x, y, beta);
        let z = Vector2::new(range, bearing);
        let f = init_feature(&model, &pose, &z, 0).unwrap();
        let back = measure_exact(&VehiclePose { x, y, beta }, &f.mean).unwrap();
        prop_assert!((back.range - range).abs() < 1e-9);
        prop_assert!(wrap_angle(back.bearing - bearing).abs() < 1e-9);
        prop_assert!(f.cov.cholesky().is_some());
        prop_assert!((f.cov - f.cov.transpose()).amax() < 1e-15);
    }

    #[test]
    fn process_cov_accumulates_through_deferral(steps in 1usize..6, v in 0.5f64..3.0) {
        let model = VehicleModel::default();
        let u = ControlInput { v_l: v, alpha: 0.05 };
        let mut pose = pose3(0.0, 0.0, 0.1);
        let mut cov: Option<DMatrix<f64>> = None;
        for _ in 0..steps {
            let (mean, next) = implicit_sampling::filter::deferred_predict(&model, &pose, cov.as_ref(), &u).unwrap();
            if let Some(prev) = &cov {
                prop_assert!(next.trace() > prev.trace());
            }
            pose = mean;
            cov = Some(next);
        }
        let c = cov.unwrap();
        prop_assert!(Matrix3::from_fn(|i, j| c[(i, j)]).cholesky().is_some());
    }
}
