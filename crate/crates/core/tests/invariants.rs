use proptest::prelude::*;
use smoothkit::fixtures::{oscillator_2d, scalar_model, switching_2d};
use smoothkit::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn validation_is_pure(sigma in -1.0f64..1.0, n in 1usize..50) {
        let spec = scalar_model(0.1, 1.0, 1.0, sigma, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, n).unwrap();
        let first = validate_model(&spec, &grid);
        prop_assert_eq!(first.clone(), validate_model(&spec, &grid));
        prop_assert_eq!(first.is_ok(), sigma * sigma > 1e-10);
    }

    #[test]
    fn grid_nodes_are_uniform(t_end in 0.01f64..100.0, n in 1usize..5000) {
        let grid = TimeGrid::new(t_end, n).unwrap();
        prop_assert_eq!(grid.node(0), 0.0);
        prop_assert!((grid.node(n) - t_end).abs() <= 4.0 * f64::EPSILON * t_end);
        prop_assert!((0..n).all(|i| grid.node(i + 1) > grid.node(i)));
    }

    #[test]
    fn table_lookup_is_left_closed(t in 0.0f64..=1.0) {
        let spec = switching_2d();
        let expect = if t < 0.5 { -0.5 } else { -0.1 };
        prop_assert_eq!(spec.a.eval(t).unwrap()[(0, 0)], expect);
    }

    #[test]
    fn smoothed_cross_covariance_is_symmetric(i in 0usize..=30, j in 0usize..=30, seed in 0u64..50) {
        let spec = oscillator_2d();
        let grid = TimeGrid::new(1.0, 30).unwrap();
        let obs = simulate(&spec, &grid, seed).unwrap().observations;
        let bf = bf_smooth(&spec, &grid, &obs, &SolverOptions { max_substep: 0.01, ..Default::default() }).unwrap();
        prop_assert_eq!(bf.cross_cov(i, j).unwrap(), bf.cross_cov(j, i).unwrap().transpose());
    }

    #[test]
    fn bands_are_ordered(level in 0.0f64..0.99, seed in 0u64..20) {
        let spec = oscillator_2d();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let obs = simulate(&spec, &grid, seed).unwrap().observations;
        let bf = bf_smooth(&spec, &grid, &obs, &SolverOptions { max_substep: 0.01, ..Default::default() }).unwrap();
        let batch = sample_conditional_paths(&spec, &grid, &bf, 200, seed).unwrap();
        for kind in [BandKind::Pointwise, BandKind::Simultaneous] {
            let band = confidence_band(&batch, level, kind).unwrap();
            for i in 0..=10 {
                prop_assert!((0..2).all(|k| band.lower[i][k] <= band.upper[i][k]));
            }
        }
        let sim = confidence_band(&batch, level, BandKind::Simultaneous).unwrap();
        prop_assert!(sim.containment(&batch).unwrap() >= level);
    }
}
