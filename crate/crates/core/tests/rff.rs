use consensus_kf::linalg::{ControlVector, StateVector};
use consensus_kf::models::{fit_rff_predictor, Predictor, RffConfig, RffRegressor};
use consensus_kf::simulator::Trajectory;
use consensus_kf::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn trajectory(states: Vec<StateVector>, controls: Vec<ControlVector>) -> Trajectory {
    Trajectory {
        dt: 1.0,
        times: (0..states.len()).map(|k| k as f64).collect(),
        states,
        controls,
        observations: Vec::new(),
    }
}

/// `x' = 0.9 x + 0.1 u + w`, `w ~ N(0, sigma^2)`, inputs uniform.
fn scalar_system(samples: usize, sigma: f64, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = 0.0;
    let (mut xs, mut us) = (Vec::new(), Vec::new());
    for _ in 0..samples {
        let u: f64 = rng.random_range(-1.0..1.0);
        xs.push(DVector::from_element(1, x));
        us.push(DVector::from_element(1, u));
        let w: f64 = rng.sample(StandardNormal);
        x = 0.9 * x + 0.1 * u + sigma * w;
    }
    trajectory(xs, us)
}

fn one_step_rmse(model: &dyn Predictor, t: &Trajectory) -> f64 {
    let mut sq = 0.0;
    for k in 0..t.len() - 1 {
        let e = &t.states[k + 1] - model.predict(&t.states[k], &t.controls[k]).unwrap();
        sq += e.norm_squared();
    }
    (sq / (t.len() - 1) as f64).sqrt()
}

/// Ordinary least squares `x' = a x + b u` fitted on `train`, scored on `test`.
fn least_squares_rmse(train: &Trajectory, test: &Trajectory) -> f64 {
    let l = train.len() - 1;
    let phi = DMatrix::from_fn(l, 2, |k, j| if j == 0 { train.states[k][0] } else { train.controls[k][0] });
    let y = DVector::from_fn(l, |k, _| train.states[k + 1][0]);
    let theta = (phi.transpose() * &phi).try_inverse().unwrap() * phi.transpose() * y;
    let mut sq = 0.0;
    for k in 0..test.len() - 1 {
        let p = theta[0] * test.states[k][0] + theta[1] * test.controls[k][0];
        sq += (test.states[k + 1][0] - p).powi(2);
    }
    (sq / (test.len() - 1) as f64).sqrt()
}

fn config(features: usize, seed: u64) -> RffConfig {
    RffConfig {
        features,
        ridge: 1e-8,
        seed,
        ..RffConfig::default()
    }
}

#[test]
fn identity_dynamics_are_reproduced() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<Trajectory> = (0..40)
        .map(|_| {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let us = (0..10).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
            trajectory(vec![x; 10], us)
        })
        .collect();
    for seed in [0, 9] {
        let m = fit_rff_predictor(&data, &config(64, seed)).unwrap();
        let worst = data.iter().map(|t| one_step_rmse(&m, t)).fold(0.0, f64::max);
        assert!(worst < 1e-3, "seed {seed}: training RMSE {worst}");
    }
}

#[test]
fn scalar_system_is_close_to_least_squares() {
    let train = scalar_system(500, 0.01, 11);
    let test = scalar_system(500, 0.01, 12);
    let oracle = least_squares_rmse(&train, &test);
    for seed in [3, 4] {
        let m = fit_rff_predictor(std::slice::from_ref(&train), &config(128, seed)).unwrap();
        let rmse = one_step_rmse(&m, &test);
        assert!(rmse <= 1.1 * oracle, "seed {seed}: held-out RMSE {rmse} vs least squares {oracle}");
    }
}

#[test]
fn training_loss_does_not_increase_with_features() {
    let data = [scalar_system(400, 0.01, 21)];
    let losses: Vec<f64> = [16, 64, 256]
        .iter()
        .map(|&f| one_step_rmse(&fit_rff_predictor(&data, &config(f, 5)).unwrap(), &data[0]))
        .collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "losses {losses:?}");
}

#[test]
fn fit_is_deterministic_and_prediction_pure() {
    let data = [scalar_system(200, 0.01, 31)];
    let a = fit_rff_predictor(&data, &config(32, 8)).unwrap();
    let b = fit_rff_predictor(&data, &config(32, 8)).unwrap();
    assert_eq!(a, b);
    let (x, u) = (&data[0].states[5], &data[0].controls[5]);
    assert_eq!(a.predict(x, u).unwrap(), a.predict(x, u).unwrap());
    let c = fit_rff_predictor(&data, &config(32, 9)).unwrap();
    assert_ne!(a.frequencies, c.frequencies);
}

#[test]
fn training_targets_are_reproduced_within_fit_residual() {
    let data = [scalar_system(300, 0.0, 41)];
    let m: RffRegressor = fit_rff_predictor(&data, &config(128, 2)).unwrap();
    assert!(one_step_rmse(&m, &data[0]) < 1e-4);
    assert_eq!(m.features(), 128);
    assert!(m.input_norm.scale.iter().all(|s| *s > 0.0));
}

#[test]
fn degenerate_data_is_rejected() {
    let same = trajectory(vec![DVector::from_element(2, 1.0); 20], vec![DVector::from_element(1, 0.5); 20]);
    let err = fit_rff_predictor(&[same], &config(16, 0)).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { .. } | Error::DegenerateData(_)), "{err}");

    let one = trajectory(vec![DVector::from_element(1, 1.0)], vec![DVector::from_element(1, 0.0)]);
    assert!(fit_rff_predictor(&[one], &config(16, 0)).is_err());

    let bad = RffConfig { ridge: 0.0, ..config(16, 0) };
    assert!(fit_rff_predictor(&[scalar_system(50, 0.01, 1)], &bad).is_err());
}

#[test]
fn dimension_mismatch_is_an_error() {
    let m = fit_rff_predictor(&[scalar_system(100, 0.01, 51)], &config(16, 0)).unwrap();
    let err = m.predict(&DVector::zeros(2), &DVector::zeros(1)).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
    let err = m.predict(&DVector::zeros(1), &DVector::zeros(3)).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
}
