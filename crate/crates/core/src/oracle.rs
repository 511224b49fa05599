//! Exact discrete-time references.
//!
//! The continuous model is discretized on the grid as
//!
//! ```text
//! X_{i+1} = A_i X_i + N(0, Q_i),   dY_i = H_i X_i + N(0, R_i)
//! ```
//!
//! with `A_i = I + a h`, `Q_i = b b^T h`, `H_i = c h`, `R_i = sigma sigma^T h`
//! evaluated at `s_i`. On this model the discrete Kalman filter with RTS
//! smoother and brute-force Gaussian conditioning of the stacked vector are
//! both exact, so they check each other; their gap to the continuous
//! solvers shrinks like `h`.

use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{validate_model, ModelSpec, ObservationPath, TimeGrid};

/// Largest observation block `n * d2` accepted by [`joint_conditioning`].
pub const MAX_JOINT_OBS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discretization {
    /// `A = I + a h`, `Q = b b^T h`.
    Euler,
    /// `A = exp(a h)`, `Q = int_0^h e^{a r} b b^T e^{a^T r} dr`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLGSSM {
    pub grid: TimeGrid,
    pub transition: Vec<Mat>,
    pub process_noise: Vec<Mat>,
    pub observation: Vec<Mat>,
    pub observation_noise: Vec<Mat>,
    pub initial_mean: DVector<f64>,
    pub initial_cov: Mat,
}

impl DiscreteLGSSM {
    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn dim(&self) -> usize {
        self.initial_mean.len()
    }
}

/// Euler discretization of a validated model.
pub fn discretize(spec: &ModelSpec, grid: &TimeGrid) -> Result<DiscreteLGSSM> {
    discretize_with(spec, grid, Discretization::Euler)
}

pub fn discretize_with(spec: &ModelSpec, grid: &TimeGrid, scheme: Discretization) -> Result<DiscreteLGSSM> {
    validate_model(spec, grid).into_result()?;
    let h = grid.h();
    let d = spec.dims.d1;
    let mut model = DiscreteLGSSM {
        grid: *grid,
        transition: Vec::with_capacity(grid.n()),
        process_noise: Vec::with_capacity(grid.n()),
        observation: Vec::with_capacity(grid.n()),
        observation_noise: Vec::with_capacity(grid.n()),
        initial_mean: spec.initial.mean.clone(),
        initial_cov: spec.initial.clipped_cov(),
    };
    for i in 0..grid.n() {
        let t = grid.node(i);
        let (a, b, c, sigma) = (spec.a.eval(t)?, spec.b.eval(t)?, spec.c.eval(t)?, spec.sigma.eval(t)?);
        let bbt = &b * b.transpose();
        let (big_a, q) = match scheme {
            Discretization::Euler => (Mat::identity(d, d) + &a * h, &bbt * h),
            Discretization::Exponential => van_loan(&a, &bbt, h),
        };
        model.transition.push(big_a);
        model.process_noise.push(linalg::symmetrize(&q));
        model.observation.push(c * h);
        model.observation_noise.push(linalg::symmetrize(&(&sigma * sigma.transpose() * h)));
    }
    Ok(model)
}

/// `(exp(a h), int_0^h e^{a r} S e^{a^T r} dr)` from one block exponential.
fn van_loan(a: &Mat, s: &Mat, h: f64) -> (Mat, Mat) {
    let d = a.nrows();
    let mut block = Mat::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&(-a * h));
    block.view_mut((0, d), (d, d)).copy_from(&(s * h));
    block.view_mut((d, d), (d, d)).copy_from(&(a.transpose() * h));
    let e = block.exp();
    let phi = e.view((d, d), (d, d)).transpose();
    let q = &phi * e.view((0, d), (d, d));
    (phi, q)
}

#[derive(Debug, Clone)]
pub struct DiscreteEstimates {
    /// `E[X_i | dY_0..dY_{i-1}]`, matching the continuous filter at `s_i`.
    pub filter_means: Vec<DVector<f64>>,
    pub filter_covs: Vec<Mat>,
    /// `E[X_i | dY_0..dY_{n-1}]`
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<Mat>,
    /// RTS gains `G_i = P_{i|i} A_i^T P_{i+1|i}^+`.
    gains: Vec<Mat>,
}

impl DiscreteEstimates {
    /// Smoothed `Cov(X_i, X_j | all data)`.
    pub fn cross_cov(&self, i: usize, j: usize) -> Mat {
        if i > j {
            return self.cross_cov(j, i).transpose();
        }
        // i <= j: G_i G_{i+1} ... G_{j-1} P_{j|n}
        let d = self.smoothed_covs[0].nrows();
        let chain = self.gains[i..j].iter().fold(Mat::identity(d, d), |acc, g| acc * g);
        chain * &self.smoothed_covs[j]
    }
}

fn pinv(m: &Mat) -> Result<Mat> {
    let scale = linalg::max_abs(m).max(1.0);
    m.clone()
        .pseudo_inverse(1e-13 * scale)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))
}

/// Kalman filter (Joseph-form updates) and RTS smoother on `model`.
pub fn discrete_kalman_rts(model: &DiscreteLGSSM, obs: &ObservationPath) -> Result<DiscreteEstimates> {
    let n = model.n();
    let d = model.dim();
    if obs.increments.len() != n {
        return Err(Error::GridMismatch(format!("{} increments for {n} cells", obs.increments.len())));
    }
    let id = Mat::identity(d, d);
    let mut filter_means = Vec::with_capacity(n + 1);
    let mut filter_covs = Vec::with_capacity(n + 1);
    let mut upd_means = Vec::with_capacity(n + 1);
    let mut upd_covs = Vec::with_capacity(n + 1);
    let (mut m, mut p) = (model.initial_mean.clone(), model.initial_cov.clone());
    for i in 0..n {
        filter_means.push(m.clone());
        filter_covs.push(p.clone());
        let hm = &model.observation[i];
        let r = &model.observation_noise[i];
        let s = linalg::symmetrize(&(hm * &p * hm.transpose() + r));
        let chol = Cholesky::new(s.clone())
            .ok_or_else(|| Error::Numerical(format!("innovation covariance singular at node {i}")))?;
        let k = chol.solve(&(hm * &p)).transpose();
        let mu = &m + &k * (&obs.increments[i] - hm * &m);
        let ikh = &id - &k * hm;
        let pu = linalg::symmetrize(&(&ikh * &p * ikh.transpose() + &k * r * k.transpose()));
        let a = &model.transition[i];
        m = a * &mu;
        p = linalg::symmetrize(&(a * &pu * a.transpose() + &model.process_noise[i]));
        upd_means.push(mu);
        upd_covs.push(pu);
    }
    filter_means.push(m.clone());
    filter_covs.push(p.clone());

    let mut smoothed_means = vec![DVector::zeros(d); n + 1];
    let mut smoothed_covs = vec![Mat::zeros(d, d); n + 1];
    let mut gains = vec![Mat::zeros(d, d); n];
    smoothed_means[n] = m;
    smoothed_covs[n] = p;
    for i in (0..n).rev() {
        let g = &upd_covs[i] * model.transition[i].transpose() * pinv(&filter_covs[i + 1])?;
        smoothed_means[i] = &upd_means[i] + &g * (&smoothed_means[i + 1] - &filter_means[i + 1]);
        smoothed_covs[i] = linalg::symmetrize(
            &(&upd_covs[i] + &g * (&smoothed_covs[i + 1] - &filter_covs[i + 1]) * g.transpose()),
        );
        gains[i] = g;
    }
    Ok(DiscreteEstimates { filter_means, filter_covs, smoothed_means, smoothed_covs, gains })
}

/// Mean and covariance of `(X_0..X_n, dY_0..dY_{n-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: Mat,
}

impl JointGaussian {
    pub fn from_model(model: &DiscreteLGSSM) -> Self {
        let n = model.n();
        let d = model.dim();
        let e = model.observation.first().map_or(0, Mat::nrows);
        let nx = (n + 1) * d;
        let mut mean = DVector::zeros(nx + n * e);
        let mut cov = Mat::zeros(nx + n * e, nx + n * e);

        let mut means = vec![model.initial_mean.clone()];
        let mut margs = vec![model.initial_cov.clone()];
        for i in 0..n {
            means.push(&model.transition[i] * &means[i]);
            let a = &model.transition[i];
            margs.push(a * &margs[i] * a.transpose() + &model.process_noise[i]);
        }
        // cross[i][j] = Cov(X_i, X_j), filled for i >= j
        let mut cross = vec![Vec::with_capacity(n + 1); n + 1];
        for i in 0..=n {
            for j in 0..=i {
                let c = if i == j { margs[i].clone() } else { &model.transition[i - 1] * &cross[i - 1][j] };
                cross[i].push(c);
            }
        }
        let cx = |i: usize, j: usize| -> Mat {
            if i >= j {
                cross[i][j].clone()
            } else {
                cross[j][i].transpose()
            }
        };
        for i in 0..=n {
            mean.rows_mut(i * d, d).copy_from(&means[i]);
            for j in 0..=n {
                cov.view_mut((i * d, j * d), (d, d)).copy_from(&cx(i, j));
            }
        }
        for i in 0..n {
            let hm = &model.observation[i];
            mean.rows_mut(nx + i * e, e).copy_from(&(hm * &means[i]));
            for j in 0..=n {
                let yx = hm * cx(i, j);
                cov.view_mut((nx + i * e, j * d), (e, d)).copy_from(&yx);
                cov.view_mut((j * d, nx + i * e), (d, e)).copy_from(&yx.transpose());
            }
            for j in 0..n {
                let mut yy = hm * cx(i, j) * model.observation[j].transpose();
                if i == j {
                    yy += &model.observation_noise[i];
                }
                cov.view_mut((nx + i * e, nx + j * e), (e, e)).copy_from(&yy);
            }
        }
        JointGaussian { state_dim: d, obs_dim: e, n, mean, cov }
    }
}

#[derive(Debug, Clone)]
pub struct JointPosterior {
    pub state_dim: usize,
    /// `E[X_i | all data]`
    pub means: Vec<DVector<f64>>,
    /// `Cov(X_{0..n} | all data)`, `(n + 1) d1` square.
    pub cov: Mat,
}

impl JointPosterior {
    pub fn block(&self, i: usize, j: usize) -> Mat {
        let d = self.state_dim;
        self.cov.view((i * d, j * d), (d, d)).into_owned()
    }
}

/// Conditions the state block on the observation block by Schur complement.
pub fn joint_conditioning(joint: &JointGaussian, obs: &ObservationPath) -> Result<JointPosterior> {
    let (n, d, e) = (joint.n, joint.state_dim, joint.obs_dim);
    if n * e > MAX_JOINT_OBS {
        return Err(Error::InvalidInput(format!(
            "joint conditioning limited to n*d2 <= {MAX_JOINT_OBS}, got {}",
            n * e
        )));
    }
    if obs.increments.len() != n || obs.increments.iter().any(|v| v.len() != e) {
        return Err(Error::GridMismatch("observations do not match the joint law".into()));
    }
    let nx = (n + 1) * d;
    let ny = n * e;
    let sxx = joint.cov.view((0, 0), (nx, nx));
    let sxy = joint.cov.view((0, nx), (nx, ny)).into_owned();
    let syy = joint.cov.view((nx, nx), (ny, ny)).into_owned();
    let chol =
        Cholesky::new(syy).ok_or_else(|| Error::Numerical("observation block covariance singular".into()))?;
    let y = DVector::from_iterator(ny, obs.increments.iter().flat_map(|v| v.iter().copied()));
    let resid = y - joint.mean.rows(nx, ny);
    let mean = joint.mean.rows(0, nx) + &sxy * chol.solve(&resid);
    let cov = linalg::symmetrize(&(sxx - &sxy * chol.solve(&sxy.transpose())));
    let means = (0..=n).map(|i| mean.rows(i * d, d).into_owned()).collect();
    Ok(JointPosterior { state_dim: d, means, cov })
}

/// Conjugate posterior of `X ~ N(mu_x, var_x)` given `y = c X + sigma Z`.
pub fn static_scalar_posterior(mu_x: f64, var_x: f64, c: f64, sigma: f64, y: f64) -> Result<(f64, f64)> {
    check_static(var_x, sigma)?;
    let denom = c * c * var_x + sigma * sigma;
    Ok((mu_x + c * var_x * (y - c * mu_x) / denom, var_x * sigma * sigma / denom))
}

/// Same posterior through the tilted expectations
/// `E[X^k exp(-c^2 X^2 / (2 sigma^2))]`, `k = 0, 1, 2`:
/// the variance is the tilted second moment minus the squared tilted mean,
/// and the mean is `mu_x + (c / sigma^2) var (y - c mu_x)`.
pub fn static_scalar_posterior_quotient(
    mu_x: f64,
    var_x: f64,
    c: f64,
    sigma: f64,
    y: f64,
) -> Result<(f64, f64)> {
    check_static(var_x, sigma)?;
    let kappa = c * c / (sigma * sigma);
    let shrink = 1.0 + kappa * var_x;
    let e0 = shrink.powf(-0.5) * (-kappa * mu_x * mu_x / (2.0 * shrink)).exp();
    let e1 = e0 * mu_x / shrink;
    let e2 = e0 * (var_x / shrink + (mu_x / shrink).powi(2));
    let var = e2 / e0 - (e1 / e0).powi(2);
    Ok((mu_x + c / (sigma * sigma) * var * (y - c * mu_x), var))
}

fn check_static(var_x: f64, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !(var_x >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "static posterior needs sigma > 0 and var_x >= 0, got sigma={sigma}, var_x={var_x}"
        )));
    }
    Ok(())
}
