mod common;

use approx::assert_abs_diff_eq;
use convreg::estimators::{fit_a, fit_b, fit_c, Dataset};
use convreg::hyperparams::{
    cross_validate_lambda, default_partition_cells, estimate_s_partition, estimate_s_replication, lambda_schedule,
    sample_variance, select_u_from_c, theoretical_s, CellWeights, PartitionSpec,
};
use convreg::qp::SolverTolerances;
use convreg::queue_sim::generate_dataset;
use convreg::Domain;

fn tol() -> SolverTolerances {
    SolverTolerances::default()
}

#[test]
fn single_cell_gives_the_sample_variance() {
    let data = common::random_1d_dataset(1, 30, 1.0, |x| x);
    let s = estimate_s_partition(&data, &PartitionSpec::uniform(1).unwrap()).unwrap();
    assert_abs_diff_eq!(s, sample_variance(data.responses()).unwrap(), epsilon = 1e-14);
}

#[test]
fn explicit_weights_renormalize_over_usable_cells() {
    let data = Dataset::from_1d(&[0.1, 0.2, 0.6, 0.7, 0.95], &[0.0, 2.0, 1.0, 5.0, 9.0], 0.0, 1.0).unwrap();
    // cells [0, .25), [.25, .5), [.5, .75), [.75, 1]: variances 2, -, 8, -
    let spec = PartitionSpec { r: 4, weights: CellWeights::Explicit(vec![0.1, 0.2, 0.3, 0.4]) };
    let s = estimate_s_partition(&data, &spec).unwrap();
    assert_abs_diff_eq!(s, (0.1 * 2.0 + 0.3 * 8.0) / 0.4, epsilon = 1e-12);
}

#[test]
fn partition_estimate_ignores_order_within_cells() {
    let data = common::random_1d_dataset(2, 40, 1.0, |x| x * x);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.reverse();
    let shuffled = data.subset(&idx).unwrap();
    let spec = PartitionSpec::uniform(4).unwrap();
    assert_abs_diff_eq!(
        estimate_s_partition(&data, &spec).unwrap(),
        estimate_s_partition(&shuffled, &spec).unwrap(),
        epsilon = 1e-14
    );
}

#[test]
fn partition_estimate_makes_the_benchmark_feasible() {
    let (data, _) = generate_dataset(400, 5000, 3).unwrap();
    let s = estimate_s_partition(&data, &PartitionSpec::uniform(default_partition_cells(400)).unwrap()).unwrap();
    let fit = fit_c(&data, s, &tol()).unwrap();
    assert!(fit.sse <= s + 1e-6);
}

#[test]
fn replication_estimate_is_a_weighted_mean() {
    let g = |x: f64, ys: &[f64]| (vec![x], ys.to_vec());
    let groups = vec![g(0.0, &[1.0, 3.0]), g(1.0, &[0.0, 6f64.sqrt() * 2f64.sqrt() / 2f64.sqrt()])];
    let v1 = sample_variance(&groups[0].1).unwrap();
    let v2 = sample_variance(&groups[1].1).unwrap();
    let uniform = estimate_s_replication(&groups, |_| 1.0).unwrap();
    assert_abs_diff_eq!(uniform, (v1 + v2) / 2.0, epsilon = 1e-12);
    let tau = |x: &[f64]| 1.0 + x[0];
    let weighted = estimate_s_replication(&groups, tau).unwrap();
    assert_abs_diff_eq!(weighted, (v1 + 2.0 * v2) / 3.0, epsilon = 1e-12);
    let doubled = estimate_s_replication(&groups, |x| 2.0 * tau(x)).unwrap();
    assert_abs_diff_eq!(weighted, doubled, epsilon = 1e-12);
    let single = estimate_s_replication(&groups[..1], tau).unwrap();
    assert_abs_diff_eq!(single, v1, epsilon = 1e-12);
}

#[test]
fn theoretical_cap_formula() {
    assert_eq!(theoretical_s(1.0, 0.0, 50).unwrap(), 1.0);
    // 0.5 + sqrt(ln 100) / 10, with ln 100 = 4.605170185988092
    assert_abs_diff_eq!(theoretical_s(0.5, 1.0, 100).unwrap(), 0.5 + 4.605170185988092f64.sqrt() / 10.0, epsilon = 1e-15);
    let mut last = f64::INFINITY;
    for n in 3..200 {
        let s = theoretical_s(0.5, 2.0, n).unwrap();
        assert!(s < last && s > 0.5);
        last = s;
    }
    assert!(theoretical_s(-1.0, 1.0, 10).is_err());
    assert!(theoretical_s(1.0, 1.0, 1).is_err());
}

#[test]
fn bound_from_error_cap_on_noiseless_line() {
    let xs = [0.1, 0.3, 0.5, 0.7, 0.9];
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
    let data = Dataset::from_1d(&xs, &ys, 0.0, 1.0).unwrap();
    assert_abs_diff_eq!(select_u_from_c(&data, 0.0, &tol()).unwrap(), 2.0, epsilon = 1e-3);
    assert_abs_diff_eq!(select_u_from_c(&data, 10.0, &tol()).unwrap(), 0.0, epsilon = 1e-9);
}

#[test]
fn bound_from_error_cap_reproduces_the_capped_fit() {
    let (data, _) = generate_dataset(120, 5000, 4).unwrap();
    let s = estimate_s_partition(&data, &PartitionSpec::uniform(8).unwrap()).unwrap();
    let c = fit_c(&data, s, &tol()).unwrap();
    let u = select_u_from_c(&data, s, &tol()).unwrap();
    let b = fit_b(&data, u, &tol()).unwrap();
    assert!(b.sse <= s + 1e-6);
    for (fb, fc) in b.fitted_values.iter().zip(&c.fitted_values) {
        assert_abs_diff_eq!(fb, fc, epsilon = 1e-3);
    }
}

#[test]
fn schedule_values() {
    assert_eq!(lambda_schedule(1).unwrap(), 1.0);
    assert_abs_diff_eq!(lambda_schedule(1024).unwrap(), 1.0 / 256.0, epsilon = 1e-15);
    assert!(lambda_schedule(10).unwrap() > lambda_schedule(11).unwrap());
    assert!(lambda_schedule(0).is_err());
}

#[test]
fn cross_validation_selection_rules() {
    let data = common::random_1d_dataset(5, 30, 0.2, |x| 3.0 * (x - 0.5).powi(2));
    let single = cross_validate_lambda(&data, &[0.3], 5, 1, &tol()).unwrap();
    assert_eq!(single.lambda, 0.3);
    let dup = cross_validate_lambda(&data, &[0.1, 0.1], 5, 1, &tol()).unwrap();
    assert_eq!(dup.index, 0);
    assert!(dup.curve.iter().all(|v| *v >= 0.0));
    let again = cross_validate_lambda(&data, &[0.1, 0.1], 5, 1, &tol()).unwrap();
    assert_eq!(dup, again);
    assert!(cross_validate_lambda(&data, &[], 5, 1, &tol()).is_err());
    let tiny = Dataset::new(vec![vec![0.5]; 3], vec![1.0; 3], Domain::new(0.0, 1.0, 1).unwrap()).unwrap();
    assert!(cross_validate_lambda(&tiny, &[0.0], 5, 1, &tol()).is_err());
}

#[test]
fn flattening_penalty_loses_on_noiseless_convex_data() {
    let xs: Vec<f64> = (0..25).map(|i| (i as f64 + 0.5) / 25.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 4.0 * (x - 0.4).powi(2)).collect();
    let data = Dataset::from_1d(&xs, &ys, 0.0, 1.0).unwrap();
    let cv = cross_validate_lambda(&data, &[0.0, 1e6], 5, 2, &tol()).unwrap();
    assert!(cv.curve[0] <= cv.curve[1]);
    assert_eq!(cv.lambda, 0.0);
    // a huge penalty gives the flat fit on every fold
    let flat = fit_a(&data, 1e6, &tol()).unwrap();
    assert!(flat.grad_bound < 1e-6);
}
