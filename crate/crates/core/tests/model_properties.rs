mod common;

use common::{gaussian_matrix, rng, stationary_phis};
use nalgebra::{dmatrix, DMatrix, DVector};
use proptest::prelude::*;
use stvar_core::model::{forecast, forecast_from, predict_next, rolling_one_step, spectral_radius};
use stvar_core::{CoefficientStack, LaggedRegression, Panel, VarModel};

fn identity_model(phis: Vec<DMatrix<f64>>) -> VarModel {
    let m = phis[0].nrows();
    VarModel::new(phis, DMatrix::identity(m, m)).unwrap()
}

/// Largest root modulus of `z^2 - a z - b`.
fn ar2_root_radius(a: f64, b: f64) -> f64 {
    let disc = a * a + 4.0 * b;
    if disc >= 0.0 {
        let s = disc.sqrt();
        ((a + s) / 2.0).abs().max(((a - s) / 2.0).abs())
    } else {
        // complex pair with modulus sqrt(-b)
        (-b).sqrt()
    }
}

#[test]
fn companion_radius_matches_ar2_roots() {
    let mut r = rng(3);
    for _ in 0..200 {
        let a: f64 = rand::Rng::random_range(&mut r, -1.5..1.5);
        let b: f64 = rand::Rng::random_range(&mut r, -0.9..0.9);
        let mdl = identity_model(vec![dmatrix![a], dmatrix![b]]);
        let expected = ar2_root_radius(a, b);
        assert!((mdl.companion_spectral_radius() - expected).abs() < 1e-9, "a={a} b={b}");
        assert_eq!(mdl.is_stationary(), expected < 1.0 - 1e-8);
    }
}

#[test]
fn diagonal_var2_radius_is_worst_site() {
    let mut r = rng(5);
    for _ in 0..50 {
        let m = 4;
        let a: Vec<f64> = (0..m).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rand::Rng::random_range(&mut r, -0.6..0.6)).collect();
        let mdl = identity_model(vec![
            DMatrix::from_diagonal(&DVector::from_vec(a.clone())),
            DMatrix::from_diagonal(&DVector::from_vec(b.clone())),
        ]);
        let expected = a.iter().zip(&b).map(|(&a, &b)| ar2_root_radius(a, b)).fold(0.0, f64::max);
        assert!((mdl.companion_spectral_radius() - expected).abs() < 1e-9);
    }
}

#[test]
fn companion_layout() {
    let mut r = rng(8);
    let phis = stationary_phis(&mut r, 3, 2, 0.8);
    let c = identity_model(phis.clone()).companion_matrix();
    assert_eq!(c.shape(), (6, 6));
    for l in 0..3 {
        assert_eq!(c.view((0, 2 * l), (2, 2)).into_owned(), phis[l]);
    }
    assert_eq!(c.view((2, 0), (4, 4)).into_owned(), DMatrix::<f64>::identity(4, 4));
    assert_eq!(c.view((2, 4), (4, 2)).into_owned(), DMatrix::<f64>::zeros(4, 2));
}

#[test]
fn spectral_radius_of_rotation() {
    let th = 0.7f64;
    let rot = dmatrix![th.cos(), -th.sin(); th.sin(), th.cos()] * 0.9;
    assert!((spectral_radius(&rot).unwrap() - 0.9).abs() < 1e-12);
}

#[test]
fn var1_forecast_is_matrix_power() {
    let mut r = rng(11);
    for _ in 0..20 {
        let m = 5;
        let phi = stationary_phis(&mut r, 1, m, 0.9).remove(0);
        let coeffs = CoefficientStack::from_phis(std::slice::from_ref(&phi)).unwrap();
        let hist = Panel::new(gaussian_matrix(&mut r, 7, m)).unwrap();
        let last = hist.row(6);
        let fc = forecast(&coeffs, &hist, 10).unwrap();
        let mut power = DMatrix::identity(m, m);
        for (h, f) in fc.iter().enumerate() {
            power = &phi * power;
            let expected = &power * &last;
            assert!((f - expected).amax() <= 1e-12, "horizon {}", h + 1);
        }
    }
}

#[test]
fn var_p_forecast_matches_explicit_recursion() {
    let mut r = rng(12);
    let (p, m) = (3, 4);
    let phis = stationary_phis(&mut r, p, m, 0.9);
    let coeffs = CoefficientStack::from_phis(&phis).unwrap();
    let values = gaussian_matrix(&mut r, 9, m);
    let hist = Panel::new(values.clone()).unwrap();
    let mut path: Vec<DVector<f64>> = (0..9).map(|t| values.row(t).transpose()).collect();
    for _ in 0..6 {
        let t = path.len();
        let mut next = DVector::zeros(m);
        for l in 0..p {
            next += &phis[l] * &path[t - 1 - l];
        }
        path.push(next);
    }
    let fc = forecast(&coeffs, &hist, 6).unwrap();
    for (h, f) in fc.iter().enumerate() {
        assert!((f - &path[9 + h]).amax() <= 1e-12);
    }
    assert!(forecast(&coeffs, &hist.slice(0, 2), 1).is_err());
    assert!(forecast(&coeffs, &hist, 0).is_err());
}

#[test]
fn design_layout_matches_definition() {
    let mut r = rng(13);
    let (t_len, m, p) = (12, 3, 2);
    let values = gaussian_matrix(&mut r, t_len, m);
    let reg = LaggedRegression::build(&Panel::new(values.clone()).unwrap(), p).unwrap();
    assert_eq!(reg.n_obs(), t_len - p);
    for row in 0..t_len - p {
        let t = t_len - 1 - row;
        for s in 0..m {
            assert_eq!(reg.response()[(row, s)], values[(t, s)]);
            for l in 0..p {
                assert_eq!(reg.design()[(row, l * m + s)], values[(t - 1 - l, s)]);
            }
        }
    }
    assert!(LaggedRegression::build(&Panel::new(values.rows(0, 2).into_owned()).unwrap(), 2).is_err());
}

#[test]
fn design_times_coefficients_gives_one_step_predictions() {
    let mut r = rng(14);
    let (t_len, m, p) = (30, 4, 2);
    let phis = stationary_phis(&mut r, p, m, 0.8);
    let coeffs = CoefficientStack::from_phis(&phis).unwrap();
    let values = gaussian_matrix(&mut r, t_len, m);
    let reg = LaggedRegression::build(&Panel::new(values.clone()).unwrap(), p).unwrap();
    let fitted = reg.design() * coeffs.matrix();
    let rolled = rolling_one_step(&coeffs, &values, p, t_len).unwrap();
    for (k, f) in rolled.iter().enumerate() {
        let t = p + k;
        let row = t_len - 1 - t;
        assert!((f - fitted.row(row).transpose()).amax() <= 1e-12);
        let recent: Vec<_> = (0..p).map(|l| values.row(t - 1 - l).transpose()).collect();
        assert!((f - predict_next(&coeffs, &recent)).amax() == 0.0);
        assert_eq!(f, &forecast_from(&coeffs, &values, t, 1).unwrap()[0]);
    }
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let mut r = rng(15);
    let mdl = identity_model(stationary_phis(&mut r, 2, 3, 0.7));
    let a = mdl.simulate(100, 50, 42).unwrap();
    assert_eq!(a, mdl.simulate(100, 50, 42).unwrap());
    assert_ne!(a, mdl.simulate(100, 50, 43).unwrap());
    assert_eq!(a.len(), 100);
    assert!(identity_model(vec![dmatrix![1.0]]).simulate(10, 0, 1).is_err());
}

#[test]
fn simulated_var1_matches_stationary_covariance() {
    let phi = dmatrix![0.5, 0.2; -0.1, 0.4];
    let sigma = dmatrix![1.0, 0.3; 0.3, 0.5];
    let mdl = VarModel::new(vec![phi.clone()], sigma.clone()).unwrap();
    // Gamma = Phi Gamma Phi' + Sigma by fixed-point iteration
    let mut gamma = sigma.clone();
    for _ in 0..500 {
        gamma = &phi * &gamma * phi.transpose() + &sigma;
    }
    let t_len = 200_000;
    let x = mdl.simulate(t_len, 500, 7).unwrap();
    let v = x.values();
    let mean = v.row_mean();
    let centered = DMatrix::from_fn(t_len, 2, |t, s| v[(t, s)] - mean[s]);
    let cov = centered.transpose() * &centered / t_len as f64;
    assert!(mean.amax() < 0.03);
    assert!((cov - &gamma).amax() < 0.03, "gamma {gamma}");
    // lag-one autocovariance Gamma(1) = Phi Gamma
    let lag1 = DMatrix::from_fn(2, 2, |i, j| {
        (1..t_len).map(|t| centered[(t, i)] * centered[(t - 1, j)]).sum::<f64>() / t_len as f64
    });
    assert!((lag1 - &phi * &gamma).amax() < 0.03);
}

#[test]
fn coefficient_stack_round_trips_phis() {
    let mut r = rng(16);
    let phis = stationary_phis(&mut r, 3, 4, 0.9);
    let stack = CoefficientStack::from_phis(&phis).unwrap();
    for (l, phi) in phis.iter().enumerate() {
        assert_eq!(&stack.phi(l), phi);
        for s in 0..4 {
            for j in 0..4 {
                assert_eq!(stack.get(l, s, j), phi[(s, j)]);
            }
        }
    }
    let padded = stack.padded_to(5).unwrap();
    assert_eq!(padded.order(), 5);
    assert_eq!(padded.phi(4), DMatrix::zeros(4, 4));
    assert_eq!(padded.phi(2), phis[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stationary_draws_are_flagged_stationary(seed in 0u64..10_000, p in 1usize..4, m in 1usize..6) {
        let mut r = rng(seed);
        // spectral norms summing below one bound the companion radius below one
        let mdl = identity_model(stationary_phis(&mut r, p, m, 0.95));
        prop_assert!(mdl.companion_spectral_radius() < 1.0);
        prop_assert!(mdl.is_stationary());
    }

    #[test]
    fn forecasts_are_linear_in_history(seed in 0u64..10_000, a in -3.0f64..3.0) {
        let mut r = rng(seed);
        let coeffs = CoefficientStack::from_phis(&stationary_phis(&mut r, 2, 3, 0.9)).unwrap();
        let u = gaussian_matrix(&mut r, 5, 3);
        let v = gaussian_matrix(&mut r, 5, 3);
        let fu = forecast_from(&coeffs, &u, 5, 4).unwrap();
        let fv = forecast_from(&coeffs, &v, 5, 4).unwrap();
        let fw = forecast_from(&coeffs, &(&u * a + &v), 5, 4).unwrap();
        for k in 0..4 {
            prop_assert!((&fw[k] - (&fu[k] * a + &fv[k])).amax() <= 1e-10);
        }
    }
}
