mod common;

use common::{fista, max_abs_diff, rng, weighted_cd, Instance};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use stvar_core::model::{CoefficientStack, Panel};
use stvar_core::solver::{
    fit, fit_path, lambda_grid, lambda_max, rescale_column_design, threshold, SolverOptions,
};
use stvar_core::{LaggedRegression, PenaltyWeights, VarModel};

fn column(f: &stvar_core::FitResult) -> Vec<f64> {
    f.coeffs.matrix().column(0).iter().copied().collect()
}

fn solve(inst: &Instance, lambda: f64) -> stvar_core::FitResult {
    fit(&inst.regression(), &inst.weights(), lambda, None, &SolverOptions::default()).unwrap()
}

#[test]
fn agrees_with_accelerated_proximal_gradient() {
    let mut r = rng(101);
    for _ in 0..40 {
        let n = r.random_range(20..=60);
        let k = r.random_range(10..=80);
        let inst = Instance::random(&mut r, n, k, 0.5, 5.0);
        let lambda = inst.lambda_max() * r.random_range(0.05..0.9);
        let f = solve(&inst, lambda);
        assert!(f.converged());
        let b = column(&f);
        assert!(inst.kkt_residual(&b, lambda) <= 1e-6);
        let oracle = fista(&inst, lambda, 1e-10, 2_000_000);
        assert!(max_abs_diff(&b, &oracle) <= 1e-5, "gap {}", max_abs_diff(&b, &oracle));
    }
}

#[test]
fn rescaled_solution_matches_direct_weighted_descent() {
    let mut r = rng(202);
    for _ in 0..20 {
        let inst = Instance::random(&mut r, 50, 30, 0.2, 8.0);
        let lambda = inst.lambda_max() * r.random_range(0.05..0.7);
        let b = column(&solve(&inst, lambda));
        let direct = weighted_cd(&inst, lambda, 1e-13, 1_000_000);
        assert!(max_abs_diff(&b, &direct) <= 1e-6);
        let gap = inst.objective(&b, lambda) - inst.objective(&direct, lambda);
        assert!(gap.abs() <= 1e-9);
    }
}

#[test]
fn unit_weights_reduce_to_plain_lasso() {
    let mut r = rng(303);
    for _ in 0..10 {
        let mut inst = Instance::random(&mut r, 40, 25, 1.0, 2.0);
        inst.w = vec![1.0; 25];
        let lambda = inst.lambda_max() * 0.2;
        let b = column(&solve(&inst, lambda));
        assert!(max_abs_diff(&b, &weighted_cd(&inst, lambda, 1e-13, 1_000_000)) <= 1e-6);
    }
}

#[test]
fn lambda_max_is_the_zero_threshold() {
    let mut r = rng(404);
    for _ in 0..20 {
        let inst = Instance::random(&mut r, 30, 20, 0.5, 3.0);
        let reg = inst.regression();
        let lmax = lambda_max(&reg, &inst.weights()).unwrap();
        assert!((lmax - inst.lambda_max()).abs() <= 1e-12 * lmax);
        assert_eq!(solve(&inst, 1.0001 * lmax).support_size(), 0);
        assert!(solve(&inst, 0.99 * lmax).support_size() > 0);
    }
}

#[test]
fn infinite_weights_pin_coefficients_and_leave_the_rest_unchanged() {
    let mut r = rng(505);
    let mut inst = Instance::random(&mut r, 40, 12, 0.5, 2.0);
    let lambda = inst.lambda_max() * 0.1;
    let blocked = [2usize, 5, 9];
    let mut weights = inst.w.clone();
    for &j in &blocked {
        weights[j] = f64::INFINITY;
    }
    let pw = PenaltyWeights::new(weights.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect()).unwrap();
    let f = fit(&inst.regression(), &pw, lambda, None, &SolverOptions::default()).unwrap();
    let b = column(&f);
    for &j in &blocked {
        assert_eq!(b[j], 0.0);
    }
    let kept: Vec<usize> = (0..12).filter(|j| !blocked.contains(j)).collect();
    inst.x = inst.x.select_columns(&kept);
    inst.w = kept.iter().map(|&j| inst.w[j]).collect();
    let reduced = weighted_cd(&inst, lambda, 1e-13, 1_000_000);
    let b_kept: Vec<f64> = kept.iter().map(|&j| b[j]).collect();
    assert!(max_abs_diff(&b_kept, &reduced) <= 1e-6);
}

#[test]
fn rescaled_design_divides_columns_by_weights() {
    let mut r = rng(606);
    let inst = Instance::random(&mut r, 10, 6, 0.5, 4.0);
    let col = rescale_column_design(&inst.regression(), &inst.weights(), 0).unwrap();
    for j in 0..6 {
        for i in 0..10 {
            assert_eq!(col.design[(i, j)], inst.x[(i, j)] / inst.w[j]);
        }
    }
    let b = vec![1.0, -2.0, 0.0, 0.5, 3.0, -1.0];
    let back = col.back_transform(&col.forward_transform(&b));
    assert!(max_abs_diff(&b, &back) <= 1e-15);
}

#[test]
fn columns_are_fitted_independently() {
    let model = VarModel::new(
        vec![DMatrix::from_fn(4, 4, |i, j| if i == j { 0.5 } else if j == i + 1 { 0.2 } else { 0.0 })],
        DMatrix::identity(4, 4),
    )
    .unwrap();
    let panel = model.simulate(80, 100, 9).unwrap();
    let reg = LaggedRegression::build(&panel, 2).unwrap();
    let weights = PenaltyWeights::uniform(2, 4);
    let lambda = 0.1 * lambda_max(&reg, &weights).unwrap();
    let par = fit(&reg, &weights, lambda, None, &SolverOptions::default()).unwrap();
    let ser = fit(&reg, &weights, lambda, None, &SolverOptions { parallel: false, ..Default::default() }).unwrap();
    assert_eq!(par.coeffs, ser.coeffs);
    for i in 0..4 {
        let single = LaggedRegression::from_parts(
            reg.response().columns(i, 1).into_owned(),
            reg.design().clone(),
            8,
        )
        .unwrap();
        let w = PenaltyWeights::uniform(8, 1);
        // one response with 8 "lags" reproduces the column with 8 design columns
        let col = fit(&single, &w, lambda, None, &SolverOptions::default()).unwrap();
        let expect: Vec<f64> = par.coeffs.matrix().column(i).iter().copied().collect();
        let got: Vec<f64> = col.coeffs.matrix().column(0).iter().copied().collect();
        assert!(max_abs_diff(&expect, &got) <= 1e-12);
    }
}

#[test]
fn path_warm_starts_match_cold_fits() {
    let mut r = rng(707);
    let inst = Instance::random(&mut r, 40, 60, 0.5, 3.0);
    let reg = inst.regression();
    let w = inst.weights();
    let grid = lambda_grid(lambda_max(&reg, &w).unwrap(), 15, 100.0).unwrap();
    let path = fit_path(&reg, &w, &grid, &SolverOptions::default()).unwrap();
    assert_eq!(path.len(), 15);
    assert_eq!(path[0].support_size(), 0);
    for f in &path {
        let cold = fit(&reg, &w, f.lambda, None, &SolverOptions::default()).unwrap();
        let (bw, bc) = (column(f), column(&cold));
        assert!(inst.kkt_residual(&bw, f.lambda) <= 1e-6 && inst.kkt_residual(&bc, f.lambda) <= 1e-6);
        let (ow, oc) = (inst.objective(&bw, f.lambda), inst.objective(&bc, f.lambda));
        assert!((ow - oc).abs() <= 1e-10 * oc);
        // near-singular active sets late in the path limit coefficient agreement
        assert!(max_abs_diff(&bw, &bc) <= 1e-5);
    }
}

#[test]
fn huge_penalty_gives_zero_and_threshold_zeroes_small_entries() {
    let mut r = rng(808);
    let inst = Instance::random(&mut r, 30, 10, 1.0, 2.0);
    assert_eq!(solve(&inst, 1e9).support_size(), 0);
    let f = solve(&inst, inst.lambda_max() * 0.05);
    let level = column(&f).iter().map(|v| v.abs()).filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    let t = threshold(&f.coeffs, level);
    assert_eq!(t.support_size(), f.support_size() - 1);
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut r = rng(909);
    let inst = Instance::random(&mut r, 20, 5, 1.0, 2.0);
    let reg = inst.regression();
    let w = inst.weights();
    let o = SolverOptions::default();
    assert!(fit(&reg, &w, -1.0, None, &o).is_err());
    assert!(fit(&reg, &w, f64::NAN, None, &o).is_err());
    assert!(fit(&reg, &PenaltyWeights::uniform(4, 1), 0.1, None, &o).is_err());
    assert!(fit(&reg, &w, 0.1, Some(&CoefficientStack::zeros(2, 1)), &o).is_err());
    let zeros = Panel::new(DMatrix::zeros(10, 2)).unwrap();
    let zreg = LaggedRegression::build(&zeros, 1).unwrap();
    assert!(lambda_max(&zreg, &PenaltyWeights::uniform(1, 2)).is_err());
}

fn instance_strategy() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 15usize..50, 5usize..40, 0.05f64..0.9)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn converged_fits_satisfy_kkt((seed, n, k, frac) in instance_strategy()) {
        let inst = Instance::random(&mut rng(seed), n, k, 0.3, 6.0);
        let lambda = inst.lambda_max() * frac;
        let f = solve(&inst, lambda);
        prop_assert!(f.converged());
        prop_assert!(inst.kkt_residual(&column(&f), lambda) <= 1e-6);
    }

    #[test]
    fn scaling_weights_and_penalty_inversely_is_invariant(
        (seed, n, k, frac) in instance_strategy(),
        a in 0.1f64..10.0,
    ) {
        let inst = Instance::random(&mut rng(seed), n, k, 0.3, 6.0);
        let lambda = inst.lambda_max() * frac;
        let base = column(&solve(&inst, lambda));
        let scaled_w = inst.weights().scaled(a);
        let f = fit(&inst.regression(), &scaled_w, lambda / a, None, &SolverOptions::default()).unwrap();
        let scale = 1.0 + base.iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(max_abs_diff(&base, &column(&f)) <= 1e-6 * scale);
    }

    #[test]
    fn permuting_columns_permutes_the_solution(
        (seed, n, k, frac) in instance_strategy(),
        shift in 1usize..100,
    ) {
        let inst = Instance::random(&mut rng(seed), n, k, 0.3, 6.0);
        let lambda = inst.lambda_max() * frac;
        let base = column(&solve(&inst, lambda));
        let perm: Vec<usize> = (0..k).map(|j| (j * 7 + shift) % k).collect();
        let mut unique = perm.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assume!(unique.len() == k);
        let permuted = Instance {
            x: inst.x.select_columns(&perm),
            y: inst.y.clone(),
            w: perm.iter().map(|&j| inst.w[j]).collect(),
        };
        let b = column(&solve(&permuted, lambda));
        let expect: Vec<f64> = perm.iter().map(|&j| base[j]).collect();
        prop_assert!(max_abs_diff(&b, &expect) <= 1e-5);
    }

    #[test]
    fn objective_never_increases_across_sweeps((seed, n, k, frac) in instance_strategy()) {
        let inst = Instance::random(&mut rng(seed), n, k, 0.3, 6.0);
        let lambda = inst.lambda_max() * frac;
        let opts = SolverOptions { record_objective: true, ..SolverOptions::default() };
        let f = fit(&inst.regression(), &inst.weights(), lambda, None, &opts).unwrap();
        let trace = &f.columns[0].objective_trace;
        prop_assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
        // the trace is on the rescaled problem, whose optimum equals the weighted one
        let last = *trace.last().unwrap();
        prop_assert!((last - inst.objective(&column(&f), lambda)).abs() <= 1e-9 * last.max(1.0));
    }

    #[test]
    fn warm_and_cold_starts_agree((seed, n, k, frac) in instance_strategy()) {
        let inst = Instance::random(&mut rng(seed), n, k, 0.3, 6.0);
        let lambda = inst.lambda_max() * frac;
        let cold = solve(&inst, lambda);
        let other = solve(&inst, lambda * 0.5);
        let warm = fit(&inst.regression(), &inst.weights(), lambda, Some(&other.coeffs), &SolverOptions::default()).unwrap();
        prop_assert!(max_abs_diff(&column(&cold), &column(&warm)) <= 1e-6);
    }
}
