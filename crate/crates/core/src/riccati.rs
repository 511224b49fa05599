//! Forward and backward matrix Riccati solvers, the smoothing covariance
//! `w(s;T)`, and the state-transition propagators of the error drift.
//!
//! Notation used throughout:
//!
//! * `gamma(t)` solves the filtering Riccati equation
//!   `gamma' = -gamma C gamma + a gamma + gamma a^T + b b^T` with
//!   `C = c^T (sigma sigma^T)^{-1} c` and `gamma(0) = V[X_0] + eps I`.
//! * `phi(s;T)` solves `phi' = -phi b b^T phi - a^T phi - phi a + C` backwards
//!   from `phi(T;T) = 0`; it stays negative semidefinite.
//! * `w(s;T)` is the marginal covariance of the smoothing error, obtained by
//!   integrating the Lyapunov equation
//!   `w' = b b^T + w (a + b b^T phi)^T + (a + b b^T phi) w` from
//!   `w(0) = V[xi_0]`.
//!
//! Every ODE is integrated with classical RK4 on a refinement of the time
//! grid (see [`SolverOptions::max_substep`]). Riccati iterates are
//! symmetrized after every substep and projected back onto the semidefinite
//! cone when roundoff pushes an eigenvalue past `1e-8`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{CoefficientCache, FineGrid, ModelSpec, Snapshot, TimeGrid};

/// Entries beyond this magnitude abort an integration.
pub const BLOW_UP: f64 = 1e12;
/// Eigenvalue slack for the PSD/NSD projection of Riccati iterates.
pub const RICCATI_CLIP_TOL: f64 = 1e-8;
/// `gamma` counts as singular when its smallest eigenvalue drops below this
/// multiple of `1 + trace / d`.
pub const SINGULAR_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Added to `V[X_0]` before integrating `gamma` (the `gamma^eps` variant).
    pub epsilon: f64,
    /// Upper bound on the RK4 step; each grid cell is split into
    /// `ceil(h / max_substep)` equal substeps. `f64::INFINITY` gives exactly
    /// one step per cell.
    pub max_substep: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { epsilon: 0.0, max_substep: 1e-3 }
    }
}

impl SolverOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SolverOptions { epsilon, ..Default::default() }
    }
}

pub(crate) fn gamma_rhs(s: &Snapshot, g: &Mat) -> Mat {
    let ag = &s.a * g;
    -(g * &s.info * g) + &ag + ag.transpose() + &s.bbt
}

pub(crate) fn phi_rhs(s: &Snapshot, p: &Mat) -> Mat {
    let pa = p * &s.a;
    -(p * &s.bbt * p) - pa.transpose() - &pa + &s.info
}

/// Error drift `a + b b^T phi`.
pub(crate) fn error_drift(s: &Snapshot, p: &Mat) -> Mat {
    &s.a + &s.bbt * p
}

fn w_rhs(s: &Snapshot, w: &Mat, p: &Mat) -> Mat {
    let fw = error_drift(s, p) * w;
    &s.bbt + fw.transpose() + fw
}

fn rk4_autonomous(x: &Mat, h: f64, f: impl Fn(&Mat) -> Mat) -> Mat {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * h)));
    let k3 = f(&(x + &k2 * (0.5 * h)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

fn guard(m: &Mat, fine_index: usize, k: usize) -> Result<()> {
    if m.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
        return Err(Error::RiccatiBlowUp { node: fine_index.div_ceil(k) });
    }
    Ok(())
}

pub(crate) fn gamma_fine(
    spec: &ModelSpec,
    grid: &TimeGrid,
    fine: &FineGrid,
    coeffs: &CoefficientCache,
    epsilon: f64,
) -> Result<Vec<Mat>> {
    let d = spec.dims.d1;
    let mut g = spec.initial.clipped_cov() + Mat::identity(d, d) * epsilon;
    let mut out = Vec::with_capacity(fine.n_fine + 1);
    out.push(g.clone());
    for j in 0..fine.n_fine {
        let snap = coeffs.at(fine.mid(grid, j))?;
        g = rk4_autonomous(&g, fine.hf, |x| gamma_rhs(&snap, x));
        g = linalg::clip_psd(&g, RICCATI_CLIP_TOL);
        guard(&g, j + 1, fine.k)?;
        out.push(g.clone());
    }
    Ok(out)
}

/// Backward sweep from `phi = 0` at fine node `end`; returns values on fine
/// nodes `0..=end`.
fn phi_fine(
    grid: &TimeGrid,
    fine: &FineGrid,
    coeffs: &CoefficientCache,
    d: usize,
    end: usize,
) -> Result<Vec<Mat>> {
    let mut p = Mat::zeros(d, d);
    let mut out = vec![Mat::zeros(d, d); end + 1];
    for j in (0..end).rev() {
        let snap = coeffs.at(fine.mid(grid, j))?;
        p = rk4_autonomous(&p, -fine.hf, |x| phi_rhs(&snap, x));
        p = linalg::clip_nsd(&p, RICCATI_CLIP_TOL);
        guard(&p, j, fine.k)?;
        out[j] = p.clone();
    }
    Ok(out)
}

fn w_fine(
    grid: &TimeGrid,
    fine: &FineGrid,
    coeffs: &CoefficientCache,
    phi: &[Mat],
    xi0: &Mat,
) -> Result<Vec<Mat>> {
    let mut w = xi0.clone();
    let mut out = Vec::with_capacity(phi.len());
    out.push(w.clone());
    for j in 0..phi.len() - 1 {
        let snap = coeffs.at(fine.mid(grid, j))?;
        let pm = phi_mid(&snap, phi, j, fine.hf);
        let h = fine.hf;
        let k1 = w_rhs(&snap, &w, &phi[j]);
        let k2 = w_rhs(&snap, &(&w + &k1 * (0.5 * h)), &pm);
        let k3 = w_rhs(&snap, &(&w + &k2 * (0.5 * h)), &pm);
        let k4 = w_rhs(&snap, &(&w + &k3 * h), &phi[j + 1]);
        w = linalg::symmetrize(&(&w + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)));
        guard(&w, j + 1, fine.k)?;
        out.push(w.clone());
    }
    Ok(out)
}

pub(crate) fn phi_mid(snap: &Snapshot, phi: &[Mat], j: usize, hf: f64) -> Mat {
    linalg::hermite_mid(&phi[j], &phi[j + 1], &phi_rhs(snap, &phi[j]), &phi_rhs(snap, &phi[j + 1]), hf)
}

pub(crate) fn gamma_mid(snap: &Snapshot, gamma: &[Mat], j: usize, hf: f64) -> Mat {
    linalg::hermite_mid(
        &gamma[j],
        &gamma[j + 1],
        &gamma_rhs(snap, &gamma[j]),
        &gamma_rhs(snap, &gamma[j + 1]),
        hf,
    )
}

fn every_kth(v: &[Mat], k: usize) -> Vec<Mat> {
    v.iter().step_by(k).cloned().collect()
}

/// Filtering covariance `gamma(s_i)` at every grid node.
pub fn solve_gamma_forward(spec: &ModelSpec, grid: &TimeGrid, opts: &SolverOptions) -> Result<Vec<Mat>> {
    let fine = FineGrid::new(grid, opts);
    let coeffs = CoefficientCache::new(spec);
    Ok(every_kth(&gamma_fine(spec, grid, &fine, &coeffs, opts.epsilon)?, fine.k))
}

/// `phi(s_i; s_t)` for `i = 0..=t_index`.
pub fn solve_phi_backward(
    spec: &ModelSpec,
    grid: &TimeGrid,
    t_index: usize,
    opts: &SolverOptions,
) -> Result<Vec<Mat>> {
    if t_index > grid.n() {
        return Err(Error::InvalidInput(format!("terminal node {t_index} beyond grid")));
    }
    let fine = FineGrid::new(grid, opts);
    let coeffs = CoefficientCache::new(spec);
    let phi = phi_fine(grid, &fine, &coeffs, spec.dims.d1, t_index * fine.k)?;
    Ok(every_kth(&phi, fine.k))
}

/// Covariance of the initial smoothing error,
/// `V^{1/2} (I - V^{1/2} phi_0 V^{1/2})^{-1} V^{1/2}`; well defined for
/// singular `V`.
pub fn xi0_covariance(v0: &Mat, phi0: &Mat) -> Result<Mat> {
    let d = v0.nrows();
    let r = linalg::psd_sqrt(v0);
    let inner = linalg::symmetrize(&(Mat::identity(d, d) - &r * phi0 * &r));
    let lam = linalg::min_eigenvalue(&inner);
    if lam <= 1e-12 {
        return Err(Error::Numerical(format!(
            "I - V^1/2 phi V^1/2 has eigenvalue {lam:e}; phi(0;T) is not negative semidefinite"
        )));
    }
    let inv = linalg::inv_spd(&inner)
        .ok_or_else(|| Error::Numerical("initial smoothing covariance not invertible".into()))?;
    Ok(linalg::symmetrize(&(&r * inv * &r)))
}

/// Riccati solutions for one terminal time `T = grid.t_end()`.
#[derive(Debug, Clone)]
pub struct RiccatiField {
    pub grid: TimeGrid,
    /// `gamma(s_i)`
    pub gamma: Vec<Mat>,
    /// `phi(s_i; T)`
    pub phi: Vec<Mat>,
    /// `w(s_i; T) = V[xi_{s_i;T}]`
    pub w: Vec<Mat>,
    /// `V[xi_{0;T}]`
    pub xi0_cov: Mat,
    pub epsilon: f64,
    pub(crate) fine: FineGrid,
    pub(crate) gamma_fine: Vec<Mat>,
    pub(crate) phi_fine: Vec<Mat>,
}

impl RiccatiField {
    pub fn compute(spec: &ModelSpec, grid: &TimeGrid, opts: &SolverOptions) -> Result<Self> {
        let fine = FineGrid::new(grid, opts);
        let coeffs = CoefficientCache::new(spec);
        let d = spec.dims.d1;
        let gamma_fine = gamma_fine(spec, grid, &fine, &coeffs, opts.epsilon)?;
        let phi_fine = phi_fine(grid, &fine, &coeffs, d, fine.n_fine)?;
        let v0 = spec.initial.clipped_cov() + Mat::identity(d, d) * opts.epsilon;
        let xi0_cov = xi0_covariance(&v0, &phi_fine[0])?;
        let w = every_kth(&w_fine(grid, &fine, &coeffs, &phi_fine, &xi0_cov)?, fine.k);
        Ok(RiccatiField {
            grid: *grid,
            gamma: every_kth(&gamma_fine, fine.k),
            phi: every_kth(&phi_fine, fine.k),
            w,
            xi0_cov,
            epsilon: opts.epsilon,
            fine,
            gamma_fine,
            phi_fine,
        })
    }

    pub fn dim(&self) -> usize {
        self.xi0_cov.nrows()
    }

    /// Smallest eigenvalue of `gamma(s_i) - w(s_i;T)` over all nodes.
    pub fn min_information_gap(&self) -> f64 {
        self.gamma
            .iter()
            .zip(&self.w)
            .map(|(g, w)| linalg::min_eigenvalue(&(g - w)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Fails with [`Error::SingularCovariance`] if some `gamma` on the
    /// integration grid cannot be inverted safely.
    pub fn check_gamma_invertible(&self) -> Result<()> {
        for (j, g) in self.gamma_fine.iter().enumerate() {
            let lam = linalg::min_eigenvalue(g);
            if lam < SINGULAR_TOL * (1.0 + g.trace().abs() / g.nrows() as f64) {
                return Err(Error::SingularCovariance { node: j / self.fine.k, min_eig: lam });
            }
        }
        Ok(())
    }
}

/// `w(s_i; T)` recomputed from the field's backward solution and `V[xi_0]`.
pub fn smoothing_w(spec: &ModelSpec, grid: &TimeGrid, field: &RiccatiField) -> Result<Vec<Mat>> {
    if !grid.same_as(&field.grid) {
        return Err(Error::GridMismatch("field computed on a different grid".into()));
    }
    let coeffs = CoefficientCache::new(spec);
    let w = w_fine(grid, &field.fine, &coeffs, &field.phi_fine, &field.xi0_cov)?;
    Ok(every_kth(&w, field.fine.k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftFamily {
    /// `a + b b^T phi(s;T)`, the smoothing-error drift.
    Alpha,
    /// `a + b b^T gamma(s)^{-1}`, the backward smoother drift.
    Beta,
}

/// Per-cell transition matrices of `M' = F(s) M` for one drift family.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub grid: TimeGrid,
    pub family: DriftFamily,
    /// `cells[i]` maps `s_i` to `s_{i+1}`.
    pub cells: Vec<Mat>,
}

impl Propagator {
    /// Transition from node `u` to node `s >= u`; the identity when `u == s`.
    pub fn compose(&self, u: usize, s: usize) -> Mat {
        assert!(u <= s && s <= self.cells.len(), "compose({u}, {s}) out of order");
        let d = self.cells.first().map_or(0, Mat::nrows);
        self.cells[u..s].iter().fold(Mat::identity(d, d), |acc, m| m * acc)
    }
}

pub(crate) fn inverse_checked(g: &Mat, node: usize) -> Result<Mat> {
    let lam = linalg::min_eigenvalue(g);
    if lam < SINGULAR_TOL * (1.0 + g.trace().abs() / g.nrows() as f64) {
        return Err(Error::SingularCovariance { node, min_eig: lam });
    }
    linalg::inv_jittered(g).ok_or(Error::SingularCovariance { node, min_eig: lam })
}

pub fn build_propagator(
    family: DriftFamily,
    spec: &ModelSpec,
    grid: &TimeGrid,
    field: &RiccatiField,
) -> Result<Propagator> {
    if !grid.same_as(&field.grid) {
        return Err(Error::GridMismatch("field computed on a different grid".into()));
    }
    let coeffs = CoefficientCache::new(spec);
    let fine = field.fine;
    let d = spec.dims.d1;
    let mut cells = Vec::with_capacity(grid.n());
    for i in 0..grid.n() {
        let mut cell = Mat::identity(d, d);
        for q in 0..fine.k {
            let j = i * fine.k + q;
            let snap = coeffs.at(fine.mid(grid, j))?;
            let (f0, fm, f1) = match family {
                DriftFamily::Alpha => {
                    let pm = phi_mid(&snap, &field.phi_fine, j, fine.hf);
                    (
                        error_drift(&snap, &field.phi_fine[j]),
                        error_drift(&snap, &pm),
                        error_drift(&snap, &field.phi_fine[j + 1]),
                    )
                }
                DriftFamily::Beta => {
                    let gm = gamma_mid(&snap, &field.gamma_fine, j, fine.hf);
                    let node = i;
                    (
                        &snap.a + &snap.bbt * inverse_checked(&field.gamma_fine[j], node)?,
                        &snap.a + &snap.bbt * inverse_checked(&gm, node)?,
                        &snap.a + &snap.bbt * inverse_checked(&field.gamma_fine[j + 1], node + 1)?,
                    )
                }
            };
            cell = linalg::rk4_transition(&f0, &fm, &f1, fine.hf) * cell;
        }
        if cell.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite propagator cell {i}")));
        }
        cells.push(cell);
    }
    Ok(Propagator { grid: *grid, family, cells })
}

/// Smoothing cross-covariance `gamma(s_i, s_j; T)`.
pub fn cross_covariance(field: &RiccatiField, alpha: &Propagator, i: usize, j: usize) -> Mat {
    if i >= j {
        alpha.compose(j, i) * &field.w[j]
    } else {
        cross_covariance(field, alpha, j, i).transpose()
    }
}

/// Diagonal of `w(s_i;T)` as standard deviations, one vector per node.
pub fn marginal_std(field: &RiccatiField) -> Vec<DVector<f64>> {
    field.w.iter().map(|w| w.diagonal().map(|v| v.max(0.0).sqrt())).collect()
}
