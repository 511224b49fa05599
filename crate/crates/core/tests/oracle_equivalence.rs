mod common;

use common::{max_mat_gap, max_vec_gap};
use nalgebra::DVector;
use proptest::prelude::*;
use smoothkit::fixtures::{oscillator_2d, scalar_benchmark, switching_2d};
use smoothkit::oracle::*;
use smoothkit::*;

fn random_model(d1: usize, d2: usize, vals: &[f64]) -> ModelSpec {
    let mut it = vals.iter().copied().cycle();
    let mut take = |r: usize, c: usize, scale: f64| Mat::from_fn(r, c, |_, _| scale * it.next().unwrap());
    let a = take(d1, d1, 1.0);
    let b = take(d1, d1, 0.8);
    let c = take(d2, d1, 1.0);
    let sigma = take(d2, d2, 0.3) + Mat::identity(d2, d2) * 0.7;
    let l = take(d1, d1, 0.5);
    let cov = &l * l.transpose() + Mat::identity(d1, d1) * 0.1;
    let mean = DVector::from_iterator(d1, (0..d1).map(|_| take(1, 1, 1.0)[(0, 0)]));
    ModelSpec {
        dims: Dims { d1, d2, m1: d1, m2: d2 },
        a: CoefficientProvider::constant(a),
        b: CoefficientProvider::constant(b),
        c: CoefficientProvider::constant(c),
        sigma: CoefficientProvider::constant(sigma),
        initial: InitialLaw::new(mean, cov),
        horizon: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kalman_rts_equals_joint_conditioning(
        d1 in 1usize..=3,
        d2 in 1usize..=2,
        n in 1usize..=12,
        vals in proptest::collection::vec(-1.0f64..1.0, 16),
        seed in 0u64..1000,
    ) {
        let spec = random_model(d1, d2, &vals);
        let grid = TimeGrid::new(1.0, n).unwrap();
        let obs = simulate(&spec, &grid, seed).unwrap().observations;
        let model = discretize(&spec, &grid).unwrap();
        let est = discrete_kalman_rts(&model, &obs).unwrap();
        let post = joint_conditioning(&JointGaussian::from_model(&model), &obs).unwrap();
        prop_assert!(max_vec_gap(&est.smoothed_means, &post.means) <= 1e-9);
        for i in 0..=n {
            for j in 0..=n {
                prop_assert!((est.cross_cov(i, j) - post.block(i, j)).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn bf_equals_direct_on_random_models(
        d1 in 1usize..=3,
        vals in proptest::collection::vec(-1.0f64..1.0, 16),
        seed in 0u64..1000,
    ) {
        let spec = random_model(d1, 1, &vals);
        let grid = TimeGrid::new(1.0, 30).unwrap();
        let obs = simulate(&spec, &grid, seed).unwrap().observations;
        let opts = SolverOptions { max_substep: 0.01, ..Default::default() };
        let bf = bf_smooth(&spec, &grid, &obs, &opts).unwrap();
        let direct = direct_integral_smooth(&spec, &grid, &obs, &opts).unwrap();
        prop_assert!(max_vec_gap(&bf.means, &direct.means) <= 1e-9);
    }
}

#[test]
fn kalman_rts_equals_joint_at_moderate_size() {
    let spec = switching_2d();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let obs = simulate(&spec, &grid, 9).unwrap().observations;
    let model = discretize(&spec, &grid).unwrap();
    let est = discrete_kalman_rts(&model, &obs).unwrap();
    let post = joint_conditioning(&JointGaussian::from_model(&model), &obs).unwrap();
    assert!(max_vec_gap(&est.smoothed_means, &post.means) <= 1e-9);
    for (i, j) in [(0, 0), (0, 50), (13, 29), (50, 50), (44, 7)] {
        assert!((est.cross_cov(i, j) - post.block(i, j)).amax() <= 1e-9);
    }
}

/// Max-node gaps (filter means, smoothed means, smoothed covariances) between
/// the continuous solvers and the Euler oracle, data shared via coarsening.
fn oracle_gaps(spec: &ModelSpec, n: usize, fine: &SimulationOutput) -> (f64, f64, f64) {
    let grid = TimeGrid::new(1.0, n).unwrap();
    let obs = fine.observations.coarsen(fine.grid.n() / n).unwrap();
    let opts = SolverOptions::default();
    let f = kalman_bucy(spec, &grid, &obs, &opts).unwrap();
    let bf = bf_smooth(spec, &grid, &obs, &opts).unwrap();
    let est = discrete_kalman_rts(&discretize(spec, &grid).unwrap(), &obs).unwrap();
    (
        max_vec_gap(&f.means, &est.filter_means),
        max_vec_gap(&bf.means, &est.smoothed_means),
        max_mat_gap(&bf.marginal_cov, &est.smoothed_covs),
    )
}

#[test]
fn continuous_solvers_converge_linearly_to_oracle() {
    for spec in [scalar_benchmark(), oscillator_2d(), switching_2d()] {
        let fine = simulate(&spec, &TimeGrid::new(1.0, 1000).unwrap(), 31).unwrap();
        let coarse = oracle_gaps(&spec, 250, &fine);
        let finer = oracle_gaps(&spec, 500, &fine);
        for (label, e1, e2) in [
            ("filter", coarse.0, finer.0),
            ("smoother mean", coarse.1, finer.1),
            ("smoother cov", coarse.2, finer.2),
        ] {
            let ratio = e1 / e2;
            assert!((1.7..=2.3).contains(&ratio), "{label}: {e1:e} / {e2:e} = {ratio}");
            assert!(e2 < 0.01, "{label}: {e2:e}");
        }
    }
}

#[test]
fn exponential_oracle_is_tighter_for_transitions() {
    // Without observations the exponential discretization is exact for the
    // prior, so only the continuous solvers' own error remains.
    let spec = oscillator_2d().without_observations();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let obs = simulate(&oscillator_2d(), &grid, 1).unwrap().observations;
    let opts = SolverOptions::default();
    let prior_cov = solve_gamma_forward(&spec, &grid, &opts).unwrap();
    let prior = prior_mean_path(&spec, &grid, &opts).unwrap();
    let euler = discrete_kalman_rts(&discretize(&spec, &grid).unwrap(), &obs).unwrap();
    let exact =
        discrete_kalman_rts(&discretize_with(&spec, &grid, Discretization::Exponential).unwrap(), &obs)
            .unwrap();
    assert!(max_vec_gap(&exact.smoothed_means, &prior) < 1e-10);
    assert!(max_mat_gap(&exact.smoothed_covs, &prior_cov) < 1e-10);
    assert!(max_vec_gap(&euler.smoothed_means, &prior) > 1e-4);
}

#[test]
fn static_quotient_form_matches_closed_form() {
    for &(mu, v, c, s, y) in &[
        (0.0, 1.0, 1.0, 1.0, 1.0),
        (0.3, 2.0, -1.5, 0.4, 0.9),
        (-1.2, 0.05, 3.0, 2.0, -4.0),
        (2.0, 0.0, 1.0, 1.0, 7.0),
    ] {
        let a = static_scalar_posterior(mu, v, c, s, y).unwrap();
        let b = static_scalar_posterior_quotient(mu, v, c, s, y).unwrap();
        assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12, "{a:?} {b:?}");
    }
}

#[test]
fn nonzero_initial_mean_matches_oracle() {
    let spec = oscillator_2d()
        .with_initial(DVector::from_vec(vec![3.0, -2.0]), Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]));
    let fine = simulate(&spec, &TimeGrid::new(1.0, 800).unwrap(), 4).unwrap();
    let (_, e1, _) = oracle_gaps(&spec, 400, &fine);
    let (_, e2, _) = oracle_gaps(&spec, 800, &fine);
    assert!(e2 < 5e-3 && (1.7..=2.3).contains(&(e1 / e2)), "{e1:e} {e2:e}");
}
