//! Smoothed means `mu_{s;T} = E[X_s | Y_{0..T}]` by four routes.
//!
//! All routes share one discrete kernel: observation increment `dY_i` enters
//! at the left node `s_i` through the innovation term
//! `g_i = c_i^T (sigma_i sigma_i^T)^{-1} (dY_i - c_i E[X_{s_i}] h)`, and
//! every continuous transition is the RK4 transition of its drift over the
//! grid cell. On that kernel the direct integral
//!
//! ```text
//! mu_{s_i;T} = E[X_{s_i}] + sum_j gamma(s_i, s_j; T) g_j
//! ```
//!
//! with `gamma(s_i, s_j; T) = alpha(s_j -> s_i) w(s_j;T)` for `i >= j` is
//! reproduced exactly by the two-sweep Bryson-Frazier recursion
//!
//! ```text
//! rho_n = 0,  rho_i = g_i + A_i^T rho_{i+1}
//! f_0   = 0,  f_{i+1} = A_i (f_i + w_i g_i)
//! mu_i  = E[X_{s_i}] + f_i + w_i rho_i
//! ```
//!
//! where `A_i` is the `alpha` cell transition. In particular
//! `mu_{0;T} = E[X_0] + V[xi_0] rho_0`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterResult};
use crate::linalg::{self, Mat};
use crate::model::{
    prior_mean_path, validate_model, CoefficientCache, FineGrid, ModelSpec, ObservationPath, TimeGrid,
};
use crate::riccati::{
    build_propagator, cross_covariance, gamma_mid, inverse_checked, DriftFamily, Propagator, RiccatiField,
    SolverOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmootherMethod {
    BrysonFrazier,
    Rts,
    DirectIntegral,
    FixedPoint,
}

impl SmootherMethod {
    pub fn name(self) -> &'static str {
        match self {
            SmootherMethod::BrysonFrazier => "bf",
            SmootherMethod::Rts => "rts",
            SmootherMethod::DirectIntegral => "direct",
            SmootherMethod::FixedPoint => "fixed-point",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoothingResult {
    pub grid: TimeGrid,
    pub method: SmootherMethod,
    /// `mu_{s_i;T}`
    pub means: Vec<DVector<f64>>,
    /// `V[X_{s_i} | Y_{0..T}]`
    pub marginal_cov: Vec<Mat>,
    /// Adjoint `rho_i`; only the Bryson-Frazier route produces it.
    pub rho: Option<Vec<DVector<f64>>>,
    pub field: Option<RiccatiField>,
    pub alpha: Option<Propagator>,
}

impl SmoothingResult {
    /// `gamma(s_i, s_j; T)`; needs the Riccati field the smoother ran on.
    pub fn cross_cov(&self, i: usize, j: usize) -> Result<Mat> {
        let (Some(field), Some(alpha)) = (&self.field, &self.alpha) else {
            return Err(Error::InvalidInput(format!(
                "{} result carries no cross-covariance data",
                self.method.name()
            )));
        };
        let n = self.grid.n();
        if i > n || j > n {
            return Err(Error::InvalidInput(format!("node ({i}, {j}) beyond grid of {n} cells")));
        }
        Ok(cross_covariance(field, alpha, i, j))
    }
}

/// Shared preamble of the integral routes: field, `alpha` cells, prior mean
/// and innovation terms.
struct Kernel {
    field: RiccatiField,
    alpha: Propagator,
    prior: Vec<DVector<f64>>,
    g: Vec<DVector<f64>>,
}

impl Kernel {
    fn build(spec: &ModelSpec, grid: &TimeGrid, obs: &ObservationPath, opts: &SolverOptions) -> Result<Self> {
        validate_model(spec, grid).into_result()?;
        obs.check(spec, grid)?;
        let field = RiccatiField::compute(spec, grid, opts)?;
        let alpha = build_propagator(DriftFamily::Alpha, spec, grid, &field)?;
        let prior = prior_mean_path(spec, grid, opts)?;
        let coeffs = CoefficientCache::new(spec);
        let g = crate::filter::innovation_terms(grid, obs, &prior, &coeffs)?;
        Ok(Kernel { field, alpha, prior, g })
    }

    fn finish(
        self,
        grid: &TimeGrid,
        method: SmootherMethod,
        means: Vec<DVector<f64>>,
        rho: Option<Vec<DVector<f64>>>,
    ) -> Result<SmoothingResult> {
        if means.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite {} smoothed mean", method.name())));
        }
        Ok(SmoothingResult {
            grid: *grid,
            method,
            means,
            marginal_cov: self.field.w.clone(),
            rho,
            field: Some(self.field),
            alpha: Some(self.alpha),
        })
    }
}

/// Bryson-Frazier smoother: backward adjoint sweep, forward accumulation.
/// `O(n d^3)`.
pub fn bf_smooth(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    opts: &SolverOptions,
) -> Result<SmoothingResult> {
    let k = Kernel::build(spec, grid, obs, opts)?;
    let n = grid.n();
    let d = spec.dims.d1;
    let cells = &k.alpha.cells;

    let mut rho = vec![DVector::zeros(d); n + 1];
    for i in (0..n).rev() {
        rho[i] = &k.g[i] + cells[i].tr_mul(&rho[i + 1]);
    }

    let w = &k.field.w;
    let mut means = Vec::with_capacity(n + 1);
    let mut f = DVector::zeros(d);
    for i in 0..=n {
        means.push(&k.prior[i] + &f + &w[i] * &rho[i]);
        if i < n {
            f = &cells[i] * (f + &w[i] * &k.g[i]);
        }
    }
    k.finish(grid, SmootherMethod::BrysonFrazier, means, Some(rho))
}

/// Direct evaluation of `E[X_{s_i}] + sum_j gamma(s_i, s_j; T) g_j`.
/// `O(n^2 d^3)`.
pub fn direct_integral_smooth(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    opts: &SolverOptions,
) -> Result<SmoothingResult> {
    let k = Kernel::build(spec, grid, obs, opts)?;
    let n = grid.n();
    let d = spec.dims.d1;
    let cells = &k.alpha.cells;
    let w = &k.field.w;

    let means = (0..=n)
        .map(|i| {
            let mut acc = k.prior[i].clone();
            // j <= i: alpha(s_j -> s_i) w_j g_j, grown from the right.
            let mut left = Mat::identity(d, d);
            for j in (0..i.min(n)).rev() {
                left = &left * &cells[j];
                acc += &left * (&w[j] * &k.g[j]);
            }
            if i < n {
                acc += &w[i] * &k.g[i];
            }
            // j > i: w_i alpha(s_i -> s_j)^T g_j.
            let mut right = Mat::identity(d, d);
            let mut tail = DVector::zeros(d);
            for j in i + 1..n {
                right = &cells[j - 1] * &right;
                tail += right.tr_mul(&k.g[j]);
            }
            acc + &w[i] * tail
        })
        .collect();
    k.finish(grid, SmootherMethod::DirectIntegral, means, None)
}

/// `gamma` on the substep grid with every value and midpoint invertible.
fn checked_gamma_inverses(
    spec: &ModelSpec,
    grid: &TimeGrid,
    fine: &FineGrid,
    gamma_fine: &[Mat],
) -> Result<(Vec<Mat>, Vec<Mat>, Vec<Mat>)> {
    let coeffs = CoefficientCache::new(spec);
    let mut nodes = Vec::with_capacity(gamma_fine.len());
    for (j, g) in gamma_fine.iter().enumerate() {
        nodes.push(inverse_checked(g, j / fine.k)?);
    }
    let mut mids = Vec::with_capacity(fine.n_fine);
    let mut mid_vals = Vec::with_capacity(fine.n_fine);
    for j in 0..fine.n_fine {
        let snap = coeffs.at(fine.mid(grid, j))?;
        let gm = gamma_mid(&snap, gamma_fine, j, fine.hf);
        mids.push(inverse_checked(&gm, j / fine.k)?);
        mid_vals.push(gm);
    }
    Ok((nodes, mids, mid_vals))
}

/// Rauch-Tung-Striebel smoother run backwards from a Kalman-Bucy pass made
/// with the same `opts`. Requires `gamma` invertible on the whole grid; fails
/// with [`Error::SingularCovariance`] otherwise.
///
/// On each cell the backward mean equation `dmu = a mu + b b^T gamma^{-1}
/// (mu - mu_filter)` is solved exactly for the piecewise filter path:
///
/// ```text
/// dev_i = T_i dev_{i+1} + L_i (filter_dev_i + gamma_i g_i)
/// ```
///
/// with `T_i` the inverse transition of `B = a + b b^T gamma^{-1}` and
/// `L_i = int M(r) b b^T gamma^{-1}(r) Phi(r) dr`.
pub fn rts_smooth(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    filter: &FilterResult,
    opts: &SolverOptions,
) -> Result<SmoothingResult> {
    if !grid.same_as(&filter.grid) {
        return Err(Error::GridMismatch("filter computed on a different grid".into()));
    }
    let (recomputed, _, gamma_fine) = run_filter(spec, grid, obs, opts, false)?;
    let fine = FineGrid::new(grid, opts);
    let (inv_nodes, inv_mids, gamma_mids) = checked_gamma_inverses(spec, grid, &fine, &gamma_fine)?;
    let coeffs = CoefficientCache::new(spec);
    let n = grid.n();
    let d = spec.dims.d1;
    let id = Mat::identity(d, d);
    let h = fine.hf;

    let mut backward = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    for i in 0..n {
        let (mut m_tot, mut phi_tot, mut l_tot) = (id.clone(), id.clone(), Mat::zeros(d, d));
        for q in 0..fine.k {
            let j = i * fine.k + q;
            let snap = coeffs.at(fine.mid(grid, j))?;
            let p = [&snap.bbt * &inv_nodes[j], &snap.bbt * &inv_mids[j], &snap.bbt * &inv_nodes[j + 1]];
            let bm = [&snap.a + &p[0], &snap.a + &p[1], &snap.a + &p[2]];
            let gm = [
                &snap.a - &gamma_fine[j] * &snap.info,
                &snap.a - &gamma_mids[j] * &snap.info,
                &snap.a - &gamma_fine[j + 1] * &snap.info,
            ];
            // Stage slopes of (M, Phi, L) with M' = -M B, Phi' = G Phi, L' = M P Phi.
            let rhs = |s: usize, m: &Mat, ph: &Mat| (-(m * &bm[s]), &gm[s] * ph, m * &p[s] * ph);
            let (k1m, k1p, k1l) = rhs(0, &id, &id);
            let (m2, p2) = (&id + &k1m * (0.5 * h), &id + &k1p * (0.5 * h));
            let (k2m, k2p, k2l) = rhs(1, &m2, &p2);
            let (m3, p3) = (&id + &k2m * (0.5 * h), &id + &k2p * (0.5 * h));
            let (k3m, k3p, k3l) = rhs(1, &m3, &p3);
            let (m4, p4) = (&id + &k3m * h, &id + &k3p * h);
            let (k4m, k4p, k4l) = rhs(2, &m4, &p4);
            let m_sub = &id + (k1m + (k2m + k3m) * 2.0 + k4m) * (h / 6.0);
            let phi_sub = &id + (k1p + (k2p + k3p) * 2.0 + k4p) * (h / 6.0);
            let l_sub = (k1l + (k2l + k3l) * 2.0 + k4l) * (h / 6.0);
            l_tot += &m_tot * l_sub * &phi_tot;
            m_tot = &m_tot * m_sub;
            phi_tot = phi_sub * &phi_tot;
        }
        backward.push(m_tot);
        gains.push(l_tot);
    }

    let mut dev = vec![DVector::zeros(d); n + 1];
    dev[n] = filter.deviations[n].clone();
    for i in (0..n).rev() {
        let injected = &filter.deviations[i] + &filter.covariances[i] * &recomputed.innovation_terms[i];
        dev[i] = &backward[i] * &dev[i + 1] + &gains[i] * injected;
    }
    let means: Vec<DVector<f64>> = recomputed.prior_means.iter().zip(&dev).map(|(m, v)| m + v).collect();
    if means.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite rts smoothed mean".into()));
    }

    // dW/ds = B W + W B^T - b b^T, integrated backwards from gamma(T).
    let mut w = gamma_fine[fine.n_fine].clone();
    let mut marginal_cov = vec![Mat::zeros(d, d); n + 1];
    marginal_cov[n] = w.clone();
    for j in (0..fine.n_fine).rev() {
        let snap = coeffs.at(fine.mid(grid, j))?;
        let bm = [
            &snap.a + &snap.bbt * &inv_nodes[j + 1],
            &snap.a + &snap.bbt * &inv_mids[j],
            &snap.a + &snap.bbt * &inv_nodes[j],
        ];
        let rhs = |s: usize, x: &Mat| {
            let bx = &bm[s] * x;
            &bx + bx.transpose() - &snap.bbt
        };
        let k1 = rhs(0, &w);
        let k2 = rhs(1, &(&w - &k1 * (0.5 * h)));
        let k3 = rhs(1, &(&w - &k2 * (0.5 * h)));
        let k4 = rhs(2, &(&w - &k3 * h));
        w = linalg::symmetrize(&(&w - (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)));
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("rts covariance diverged near node {}", j / fine.k)));
        }
        if j % fine.k == 0 {
            marginal_cov[j / fine.k] = w.clone();
        }
    }

    Ok(SmoothingResult {
        grid: *grid,
        method: SmootherMethod::Rts,
        means,
        marginal_cov,
        rho: None,
        field: None,
        alpha: None,
    })
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub grid: TimeGrid,
    pub s_index: usize,
    /// `mu_{s;s_j}` for `j = s_index..=n`.
    pub means: Vec<DVector<f64>>,
}

impl FixedPointResult {
    pub fn times(&self) -> Vec<f64> {
        (self.s_index..=self.grid.n()).map(|j| self.grid.node(j)).collect()
    }

    /// `mu_{s;T}`.
    pub fn terminal(&self) -> &DVector<f64> {
        self.means.last().expect("fixed-point result is never empty")
    }
}

/// Estimate of `X_s`, `s = s_{s_index}`, refined as the horizon grows from
/// `s` to `T`. Starts at the filter mean and, on cell `k`, adds
///
/// ```text
/// G_k^T [g_k - J_k (gamma_k g_k + filter_dev_k)],   G_{k+1} = Phi_k G_k
/// ```
///
/// with `G_s = gamma(s)`, `Phi_k` the filter-error transition and
/// `J_k = int Phi^T C Phi` over the cell.
pub fn fixed_point_smooth(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    s_index: usize,
    opts: &SolverOptions,
) -> Result<FixedPointResult> {
    let n = grid.n();
    if s_index > n {
        return Err(Error::InvalidInput(format!("node {s_index} beyond grid of {n} cells")));
    }
    let (filter, info, _) = run_filter(spec, grid, obs, opts, true)?;
    let mut gain = filter.covariances[s_index].clone();
    let mut mu = filter.means[s_index].clone();
    let mut means = Vec::with_capacity(n - s_index + 1);
    means.push(mu.clone());
    for k in s_index..n {
        let g = &filter.innovation_terms[k];
        let predicted = &filter.covariances[k] * g + &filter.deviations[k];
        mu += gain.tr_mul(&(g - &info[k] * predicted));
        gain = &filter.transitions[k] * gain;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("fixed-point estimate diverged at node {k}")));
        }
        means.push(mu.clone());
    }
    Ok(FixedPointResult { grid: *grid, s_index, means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::kalman_bucy;
    use crate::fixtures::{oscillator_2d, scalar_benchmark, scalar_model, static_scalar, switching_2d};
    use crate::simulate::simulate;

    fn max_gap(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
    }

    fn coarse() -> SolverOptions {
        SolverOptions { max_substep: 0.005, ..Default::default() }
    }

    #[test]
    fn bf_matches_direct_integral() {
        for spec in [scalar_benchmark(), oscillator_2d(), switching_2d()] {
            let grid = TimeGrid::new(1.0, 40).unwrap();
            let obs = simulate(&spec, &grid, 5).unwrap().observations;
            let bf = bf_smooth(&spec, &grid, &obs, &coarse()).unwrap();
            let direct = direct_integral_smooth(&spec, &grid, &obs, &coarse()).unwrap();
            assert!(max_gap(&bf.means, &direct.means) < 1e-11);
        }
    }

    #[test]
    fn initial_mean_uses_adjoint() {
        let spec = oscillator_2d();
        let grid = TimeGrid::new(1.0, 30).unwrap();
        let obs = simulate(&spec, &grid, 2).unwrap().observations;
        let bf = bf_smooth(&spec, &grid, &obs, &coarse()).unwrap();
        let field = bf.field.as_ref().unwrap();
        let expect = &spec.initial.mean + &field.xi0_cov * &bf.rho.as_ref().unwrap()[0];
        assert!((&bf.means[0] - expect).amax() < 1e-12);
    }

    #[test]
    fn smoothers_end_at_filter_mean() {
        let spec = switching_2d();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let obs = simulate(&spec, &grid, 8).unwrap().observations;
        let f = kalman_bucy(&spec, &grid, &obs, &coarse()).unwrap();
        let bf = bf_smooth(&spec, &grid, &obs, &coarse()).unwrap();
        let rts = rts_smooth(&spec, &grid, &obs, &f, &coarse()).unwrap();
        assert!((&bf.means[50] - &f.means[50]).amax() < 1e-9);
        assert_eq!(rts.means[50], f.means[50]);
    }

    #[test]
    fn rts_agrees_with_bf() {
        for spec in [scalar_benchmark(), oscillator_2d(), switching_2d()] {
            let grid = TimeGrid::new(1.0, 50).unwrap();
            let obs = simulate(&spec, &grid, 3).unwrap().observations;
            let opts = SolverOptions::default();
            let f = kalman_bucy(&spec, &grid, &obs, &opts).unwrap();
            let bf = bf_smooth(&spec, &grid, &obs, &opts).unwrap();
            let rts = rts_smooth(&spec, &grid, &obs, &f, &opts).unwrap();
            assert!(max_gap(&bf.means, &rts.means) < 1e-7, "{}", max_gap(&bf.means, &rts.means));
            let cov_gap = bf
                .marginal_cov
                .iter()
                .zip(&rts.marginal_cov)
                .map(|(a, b)| linalg::max_abs(&(a - b)))
                .fold(0.0, f64::max);
            assert!(cov_gap < 1e-7, "{cov_gap}");
        }
    }

    #[test]
    fn rts_rejects_singular_gamma() {
        let spec = scalar_model(0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let obs = simulate(&spec, &grid, 1).unwrap().observations;
        let f = kalman_bucy(&spec, &grid, &obs, &coarse()).unwrap();
        let err = rts_smooth(&spec, &grid, &obs, &f, &coarse()).unwrap_err();
        assert!(matches!(err, Error::SingularCovariance { .. }));
        assert!(bf_smooth(&spec, &grid, &obs, &coarse()).is_ok());
    }

    #[test]
    fn fixed_point_tracks_bf() {
        let spec = oscillator_2d();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let obs = simulate(&spec, &grid, 4).unwrap().observations;
        let opts = SolverOptions::default();
        let bf = bf_smooth(&spec, &grid, &obs, &opts).unwrap();
        let f = kalman_bucy(&spec, &grid, &obs, &opts).unwrap();
        for s in [0, 13, 40] {
            let fp = fixed_point_smooth(&spec, &grid, &obs, s, &opts).unwrap();
            assert_eq!(fp.means.len(), 41 - s);
            assert_eq!(fp.means[0], f.means[s]);
            assert!((fp.terminal() - &bf.means[s]).amax() < 1e-6);
        }
    }

    #[test]
    fn static_model_posterior_mean() {
        // X_0 ~ N(0,1) observed in unit noise: E[X | Y_T] = Y_T / (1 + T).
        let spec = static_scalar();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let obs = simulate(&spec, &grid, 6).unwrap().observations;
        let y: f64 = obs.increments.iter().map(|v| v[0]).sum();
        let bf = bf_smooth(&spec, &grid, &obs, &coarse()).unwrap();
        assert!(bf.means.iter().all(|m| (m[0] - y / 2.0).abs() < 1e-10));
    }

    #[test]
    fn cross_cov_requires_field() {
        let spec = scalar_benchmark();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let obs = simulate(&spec, &grid, 6).unwrap().observations;
        let f = kalman_bucy(&spec, &grid, &obs, &coarse()).unwrap();
        let rts = rts_smooth(&spec, &grid, &obs, &f, &coarse()).unwrap();
        assert!(rts.cross_cov(1, 2).is_err());
        let bf = bf_smooth(&spec, &grid, &obs, &coarse()).unwrap();
        assert_eq!(bf.cross_cov(4, 4).unwrap(), bf.marginal_cov[4]);
        assert!(bf.cross_cov(4, 11).is_err());
    }
}
