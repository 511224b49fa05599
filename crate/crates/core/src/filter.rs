//! Kalman-Bucy filter.
//!
//! The filter mean is carried as the prior mean plus a deviation driven by
//! the observations. Each observation increment `dY_i` is attached to the
//! left node `s_i` of its cell and enters through
//! `g_i = c_i^T (sigma_i sigma_i^T)^{-1} (dY_i - c_i E[X_{s_i}] h)`; the
//! deviation then follows the filter-error flow `a - gamma C` across the
//! cell:
//!
//! ```text
//! dev_{i+1} = Phi_i (dev_i + gamma(s_i) g_i)
//! ```
//!
//! where `Phi_i` is the RK4 transition of `a - gamma C` over cell `i`.
//! Expanding `Phi_i = I + (a - gamma C) h + O(h^2)` recovers the explicit
//! left-point Kalman-Bucy update. Using the transition keeps the filter on
//! the same discrete kernel as the smoothers, so every smoother ends at the
//! filter's terminal mean.

use nalgebra::DVector;

use crate::error::Result;
use crate::linalg::{self, Mat};
use crate::model::{
    prior_mean_path, validate_model, CoefficientCache, FineGrid, ModelSpec, ObservationPath, Snapshot,
    TimeGrid,
};
use crate::riccati::{self, gamma_mid, SolverOptions};

#[derive(Debug, Clone)]
pub struct FilterResult {
    pub grid: TimeGrid,
    /// `mu_{s_i; s_i}`
    pub means: Vec<DVector<f64>>,
    /// `gamma(s_i)`
    pub covariances: Vec<Mat>,
    pub(crate) prior_means: Vec<DVector<f64>>,
    /// `mu_{s_i;s_i} - E[X_{s_i}]`
    pub(crate) deviations: Vec<DVector<f64>>,
    pub(crate) innovation_terms: Vec<DVector<f64>>,
    pub(crate) transitions: Vec<Mat>,
}

/// `c_i^T R_i^{-1} (dY_i - c_i m_i h)` for every cell.
pub(crate) fn innovation_terms(
    grid: &TimeGrid,
    obs: &ObservationPath,
    prior_means: &[DVector<f64>],
    coeffs: &CoefficientCache,
) -> Result<Vec<DVector<f64>>> {
    (0..grid.n())
        .map(|i| {
            let s = coeffs.at(grid.node(i))?;
            let resid = &obs.increments[i] - &s.c * &prior_means[i] * grid.h();
            Ok(s.c.transpose() * (&s.rinv * resid))
        })
        .collect()
}

fn filter_drift(snap: &Snapshot, g: &Mat) -> Mat {
    &snap.a - g * &snap.info
}

/// Transitions of `a - gamma C` over each grid cell. With `with_information`,
/// also returns `J_i = int_{cell} Phi(s_i -> r)^T C(r) Phi(s_i -> r) dr`.
pub(crate) fn filter_cells(
    spec: &ModelSpec,
    grid: &TimeGrid,
    fine: &FineGrid,
    gamma_fine: &[Mat],
    with_information: bool,
) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let coeffs = CoefficientCache::new(spec);
    let d = spec.dims.d1;
    let id = Mat::identity(d, d);
    let h = fine.hf;
    let mut transitions = Vec::with_capacity(grid.n());
    let mut information = Vec::new();
    for i in 0..grid.n() {
        let mut phi = id.clone();
        let mut info = Mat::zeros(d, d);
        for q in 0..fine.k {
            let j = i * fine.k + q;
            let snap = coeffs.at(fine.mid(grid, j))?;
            let gm = gamma_mid(&snap, gamma_fine, j, h);
            let (f0, fm, f1) = (
                filter_drift(&snap, &gamma_fine[j]),
                filter_drift(&snap, &gm),
                filter_drift(&snap, &gamma_fine[j + 1]),
            );
            if with_information {
                let c = &snap.info;
                let quad = |m: &Mat| m.transpose() * c * m;
                let k1 = f0.clone();
                let p2 = &id + &k1 * (0.5 * h);
                let k2 = &fm * &p2;
                let p3 = &id + &k2 * (0.5 * h);
                let k3 = &fm * &p3;
                let p4 = &id + &k3 * h;
                let k4 = &f1 * &p4;
                let step = &id + (&k1 + (&k2 + &k3) * 2.0 + &k4) * (h / 6.0);
                let j_sub = (quad(&id) + (quad(&p2) + quad(&p3)) * 2.0 + quad(&p4)) * (h / 6.0);
                info += phi.transpose() * j_sub * &phi;
                phi = step * phi;
            } else {
                phi = linalg::rk4_transition(&f0, &fm, &f1, h) * phi;
            }
        }
        transitions.push(phi);
        if with_information {
            information.push(linalg::symmetrize(&info));
        }
    }
    Ok((transitions, information))
}

/// Kalman-Bucy filter on `grid`; `opts.epsilon` regularizes `gamma(0)`.
pub fn kalman_bucy(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    opts: &SolverOptions,
) -> Result<FilterResult> {
    Ok(run_filter(spec, grid, obs, opts, false)?.0)
}

/// Filter pass shared with the smoothers; also returns the per-cell
/// information integrals when requested, and `gamma` on the substep grid.
pub(crate) fn run_filter(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    opts: &SolverOptions,
    with_information: bool,
) -> Result<(FilterResult, Vec<Mat>, Vec<Mat>)> {
    validate_model(spec, grid).into_result()?;
    obs.check(spec, grid)?;
    let fine = FineGrid::new(grid, opts);
    let coeffs = CoefficientCache::new(spec);
    let gamma_fine = riccati::gamma_fine(spec, grid, &fine, &coeffs, opts.epsilon)?;
    let (transitions, information) = filter_cells(spec, grid, &fine, &gamma_fine, with_information)?;
    let covariances: Vec<Mat> = gamma_fine.iter().step_by(fine.k).cloned().collect();
    let prior_means = prior_mean_path(spec, grid, opts)?;
    let innovation_terms = innovation_terms(grid, obs, &prior_means, &coeffs)?;

    let mut deviations = Vec::with_capacity(grid.n() + 1);
    let mut dev = DVector::zeros(spec.dims.d1);
    deviations.push(dev.clone());
    for i in 0..grid.n() {
        dev = &transitions[i] * (dev + &covariances[i] * &innovation_terms[i]);
        deviations.push(dev.clone());
    }
    let means = prior_means.iter().zip(&deviations).map(|(m, d)| m + d).collect();
    let result = FilterResult {
        grid: *grid,
        means,
        covariances,
        prior_means,
        deviations,
        innovation_terms,
        transitions,
    };
    Ok((result, information, gamma_fine))
}

/// Residual increments `dY_i - c(s_i) mu_{s_i;s_i} h`.
pub fn innovations(
    result: &FilterResult,
    spec: &ModelSpec,
    obs: &ObservationPath,
) -> Result<Vec<DVector<f64>>> {
    obs.check(spec, &result.grid)?;
    let grid = &result.grid;
    (0..grid.n())
        .map(|i| {
            let c = spec.c.eval(grid.node(i))?;
            Ok(&obs.increments[i] - c * &result.means[i] * grid.h())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{scalar_model, switching_2d};
    use crate::simulate::simulate;

    #[test]
    fn blind_filter_is_the_prior() {
        let spec = scalar_model(-0.7, 1.0, 0.0, 1.0, 2.0, 1.0);
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let obs = simulate(&spec, &grid, 1).unwrap().observations;
        let opts = SolverOptions::default();
        let f = kalman_bucy(&spec, &grid, &obs, &opts).unwrap();
        assert_eq!(f.means, prior_mean_path(&spec, &grid, &opts).unwrap());
        assert_eq!(innovations(&f, &spec, &obs).unwrap(), obs.increments);
    }

    #[test]
    fn mean_consistent_data_leaves_mean_unchanged() {
        let spec = scalar_model(0.0, 1.0, 2.0, 1.0, 0.7, 1.0);
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let incs = vec![DVector::from_element(1, 2.0 * 0.7 * grid.h()); 25];
        let obs = ObservationPath::new(grid, incs).unwrap();
        let f = kalman_bucy(&spec, &grid, &obs, &SolverOptions::default()).unwrap();
        assert!(f.means.iter().all(|m| (m[0] - 0.7).abs() < 1e-12));
        assert!(innovations(&f, &spec, &obs).unwrap().iter().all(|v| v[0].abs() < 1e-12));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let spec = scalar_model(0.0, 1.0, 1.0, 1.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let other = TimeGrid::new(1.0, 20).unwrap();
        let obs = simulate(&spec, &other, 1).unwrap().observations;
        assert!(kalman_bucy(&spec, &grid, &obs, &SolverOptions::default()).is_err());
    }

    #[test]
    fn information_integral_is_positive() {
        let spec = switching_2d();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let opts = SolverOptions { max_substep: 0.025, ..Default::default() };
        let fine = FineGrid::new(&grid, &opts);
        let coeffs = CoefficientCache::new(&spec);
        let g = riccati::gamma_fine(&spec, &grid, &fine, &coeffs, 0.0).unwrap();
        let (plain, _) = filter_cells(&spec, &grid, &fine, &g, false).unwrap();
        let (with, info) = filter_cells(&spec, &grid, &fine, &g, true).unwrap();
        for i in 0..10 {
            assert!((&plain[i] - &with[i]).norm() < 1e-14);
            assert!(linalg::min_eigenvalue(&info[i]) > 0.0);
        }
    }
}
