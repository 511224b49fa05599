//! Continuous-time linear-Gaussian model, its time grid and observations.
//!
//! The state and observation processes follow
//!
//! ```text
//! dX_t = a(t) X_t dt + b(t) dV_t
//! dY_t = c(t) X_t dt + sigma(t) dW_t
//! ```
//!
//! with `V`, `W` independent Brownian motions and a Gaussian `X_0`.
//! Coefficients are either constant or piecewise constant on left-closed
//! cells. Observations are stored as increments over the cells of a uniform
//! [`TimeGrid`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::riccati::SolverOptions;

/// Smallest admissible eigenvalue of `sigma sigma^T` at a grid node.
pub const OBS_NOISE_TOL: f64 = 1e-10;
/// Tolerance on negative eigenvalues of the initial covariance.
pub const INITIAL_PSD_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// State dimension.
    pub d1: usize,
    /// Observation dimension.
    pub d2: usize,
    /// State-noise dimension.
    pub m1: usize,
    /// Observation-noise dimension.
    pub m2: usize,
}

/// A time-dependent coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientProvider {
    Constant(Mat),
    /// Piecewise constant: `values[k]` holds on `[times[k], times[k+1])`, the
    /// last cell is closed on the right.
    Table {
        times: Vec<f64>,
        values: Vec<Mat>,
    },
}

impl CoefficientProvider {
    pub fn constant(m: Mat) -> Self {
        CoefficientProvider::Constant(m)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientProvider::Constant(_))
    }

    fn matrices(&self) -> Box<dyn Iterator<Item = &Mat> + '_> {
        match self {
            CoefficientProvider::Constant(m) => Box::new(std::iter::once(m)),
            CoefficientProvider::Table { values, .. } => Box::new(values.iter()),
        }
    }

    /// Index of the cell containing `t` (always 0 for a constant provider).
    pub fn cell_index(&self, t: f64) -> Result<usize> {
        match self {
            CoefficientProvider::Constant(_) => {
                if t.is_finite() && t >= 0.0 {
                    Ok(0)
                } else {
                    Err(Error::OutOfRange { t, start: 0.0, end: f64::INFINITY })
                }
            }
            CoefficientProvider::Table { times, values } => {
                let (start, end) = (times[0], times[times.len() - 1]);
                let slack = 1e-12 * end.abs().max(1.0);
                if !(t >= start - slack && t <= end + slack) {
                    return Err(Error::OutOfRange { t, start, end });
                }
                // number of boundaries <= t, excluding the first
                let k = times[1..].partition_point(|&b| b <= t);
                Ok(k.min(values.len() - 1))
            }
        }
    }

    /// Coefficient value at time `t`.
    pub fn eval(&self, t: f64) -> Result<Mat> {
        let k = self.cell_index(t)?;
        Ok(match self {
            CoefficientProvider::Constant(m) => m.clone(),
            CoefficientProvider::Table { values, .. } => values[k].clone(),
        })
    }

    fn value_at_cell(&self, k: usize) -> &Mat {
        match self {
            CoefficientProvider::Constant(m) => m,
            CoefficientProvider::Table { values, .. } => &values[k],
        }
    }
}

/// Gaussian law of `X_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub mean: DVector<f64>,
    pub cov: Mat,
}

impl InitialLaw {
    pub fn new(mean: DVector<f64>, cov: Mat) -> Self {
        InitialLaw { mean, cov }
    }

    /// Symmetrized covariance with small negative eigenvalues clipped to zero.
    pub fn clipped_cov(&self) -> Mat {
        linalg::clip_psd(&self.cov, 0.0)
    }
}

/// The full linear-Gaussian system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dims: Dims,
    pub a: CoefficientProvider,
    pub b: CoefficientProvider,
    pub c: CoefficientProvider,
    pub sigma: CoefficientProvider,
    pub initial: InitialLaw,
    pub horizon: f64,
}

/// Uniform grid `s_i = i h`, `i = 0..=n`, on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n: usize,
    h: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("grid needs at least one cell".into()));
        }
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidInput(format!("grid end must be positive, got {t_end}")));
        }
        Ok(TimeGrid { t_end, n, h: t_end / n as f64 })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Number of cells.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n {
            self.t_end
        } else {
            i as f64 * self.h
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n).map(move |i| self.node(i))
    }

    /// Nearest node to `t`, if `t` lies in `[0, t_end]`.
    pub fn nearest_node(&self, t: f64) -> Option<usize> {
        let slack = 1e-9 * self.t_end;
        if !(t >= -slack && t <= self.t_end + slack) {
            return None;
        }
        Some(((t / self.h).round() as usize).min(self.n))
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n == other.n && (self.t_end - other.t_end).abs() <= 1e-12 * self.t_end.max(1.0)
    }
}

/// Observation increments `dY_i = Y_{s_{i+1}} - Y_{s_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub grid: TimeGrid,
    pub increments: Vec<DVector<f64>>,
}

impl ObservationPath {
    pub fn new(grid: TimeGrid, increments: Vec<DVector<f64>>) -> Result<Self> {
        if increments.len() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "{} observation increments for a grid with {} cells",
                increments.len(),
                grid.n()
            )));
        }
        if let Some(d) = increments.first().map(|v| v.len()) {
            if increments.iter().any(|v| v.len() != d) {
                return Err(Error::InvalidInput("observation increments of mixed length".into()));
            }
        }
        if increments.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("non-finite observation increment".into()));
        }
        Ok(ObservationPath { grid, increments })
    }

    /// Sums consecutive groups of `factor` increments, giving the same path
    /// observed on a grid with `n / factor` cells.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.grid.n().is_multiple_of(factor) {
            return Err(Error::InvalidInput(format!("cannot coarsen {} cells by {factor}", self.grid.n())));
        }
        let grid = TimeGrid::new(self.grid.t_end(), self.grid.n() / factor)?;
        let increments = self
            .increments
            .chunks(factor)
            .map(|c| c.iter().fold(DVector::zeros(c[0].len()), |acc, v| acc + v))
            .collect();
        ObservationPath::new(grid, increments)
    }

    pub(crate) fn check(&self, model: &ModelSpec, grid: &TimeGrid) -> Result<()> {
        if !self.grid.same_as(grid) {
            return Err(Error::GridMismatch(format!(
                "observations on (T={}, n={}), solver grid (T={}, n={})",
                self.grid.t_end(),
                self.grid.n(),
                grid.t_end(),
                grid.n()
            )));
        }
        if self.increments.iter().any(|v| v.len() != model.dims.d2) {
            return Err(Error::GridMismatch(format!(
                "observation increments must have length d2={}",
                model.dims.d2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Outcome of [`validate_model`]; empty when every assumption holds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.0.contains(needle))
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.violations.push(Violation(msg.into()));
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidModel(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks shapes, finiteness, table coverage, the initial law and
/// non-degeneracy of the observation noise at every grid node.
pub fn validate_model(spec: &ModelSpec, grid: &TimeGrid) -> ValidationReport {
    let mut report = ValidationReport::default();
    let Dims { d1, d2, m1, m2 } = spec.dims;
    for (name, v) in [("d1", d1), ("d2", d2), ("m1", m1), ("m2", m2)] {
        if v == 0 {
            report.push(format!("dimension {name} must be positive"));
        }
    }
    if !(spec.horizon.is_finite() && spec.horizon >= 0.0) {
        report.push("horizon must be a nonnegative finite time");
    } else if grid.t_end() > spec.horizon * (1.0 + 1e-12) + 1e-12 {
        report.push(format!("grid end {} exceeds model horizon {}", grid.t_end(), spec.horizon));
    }

    let roles = [
        ("a", &spec.a, (d1, d1)),
        ("b", &spec.b, (d1, m1)),
        ("c", &spec.c, (d2, d1)),
        ("sigma", &spec.sigma, (d2, m2)),
    ];
    let mut sigma_ok = true;
    for (name, provider, shape) in roles {
        let mut ok = true;
        if provider.matrices().any(|m| m.shape() != shape) {
            report.push(format!("shape mismatch: {name}"));
            ok = false;
        }
        if provider.matrices().any(|m| m.iter().any(|x| !x.is_finite())) {
            report.push(format!("non-finite entry in {name}"));
            ok = false;
        }
        if let CoefficientProvider::Table { times, values } = provider {
            if values.is_empty() || times.len() != values.len() + 1 {
                report.push(format!("table for {name} needs one more time than values"));
                ok = false;
            } else if times.windows(2).any(|w| !(w[1] > w[0])) {
                report.push(format!("table times for {name} not strictly increasing"));
                ok = false;
            } else if times[0] > 0.0 || times[times.len() - 1] < grid.t_end() {
                report.push(format!("table for {name} does not cover [0, T]"));
                ok = false;
            }
        }
        if name == "sigma" {
            sigma_ok = ok;
        }
    }

    if spec.initial.mean.len() != d1 {
        report.push("shape mismatch: initial mean");
    }
    let cov = &spec.initial.cov;
    if cov.shape() != (d1, d1) {
        report.push("shape mismatch: initial covariance");
    } else if cov.iter().any(|x| !x.is_finite()) {
        report.push("non-finite entry in initial covariance");
    } else {
        let scale = linalg::max_abs(cov).max(1.0);
        if linalg::max_abs(&(cov - cov.transpose())) > SYMMETRY_TOL * scale {
            report.push("initial covariance not symmetric");
        }
        if d1 > 0 && linalg::min_eigenvalue(cov) < -INITIAL_PSD_TOL {
            report.push("initial covariance indefinite");
        }
    }

    if sigma_ok && d2 > 0 {
        let mut cached: HashMap<usize, f64> = HashMap::new();
        for (i, t) in grid.nodes().enumerate() {
            let Ok(k) = spec.sigma.cell_index(t) else {
                continue;
            };
            let lam = *cached.entry(k).or_insert_with(|| {
                let s = spec.sigma.value_at_cell(k);
                linalg::min_eigenvalue(&(s * s.transpose()))
            });
            if lam <= OBS_NOISE_TOL {
                report.push(format!("observation noise singular at node {i}"));
            }
        }
    }
    report
}

/// Coefficients frozen at one time, with the products the solvers need.
#[derive(Debug, Clone)]
pub(crate) struct Snapshot {
    pub a: Mat,
    pub b: Mat,
    pub bbt: Mat,
    pub c: Mat,
    /// `(sigma sigma^T)^{-1}`
    pub rinv: Mat,
    /// `c^T (sigma sigma^T)^{-1} c`
    pub info: Mat,
}

/// Memoizes [`Snapshot`]s per distinct combination of coefficient cells.
pub(crate) struct CoefficientCache<'a> {
    spec: &'a ModelSpec,
    cache: RefCell<HashMap<[usize; 4], Rc<Snapshot>>>,
}

impl<'a> CoefficientCache<'a> {
    pub fn new(spec: &'a ModelSpec) -> Self {
        CoefficientCache { spec, cache: RefCell::new(HashMap::new()) }
    }

    pub fn at(&self, t: f64) -> Result<Rc<Snapshot>> {
        let s = self.spec;
        let key = [s.a.cell_index(t)?, s.b.cell_index(t)?, s.c.cell_index(t)?, s.sigma.cell_index(t)?];
        if let Some(snap) = self.cache.borrow().get(&key) {
            return Ok(Rc::clone(snap));
        }
        let a = s.a.value_at_cell(key[0]).clone();
        let b = s.b.value_at_cell(key[1]).clone();
        let c = s.c.value_at_cell(key[2]).clone();
        let sig = s.sigma.value_at_cell(key[3]);
        let rinv = linalg::inv_spd(&(sig * sig.transpose()))
            .ok_or_else(|| Error::Numerical(format!("observation noise covariance singular at t={t}")))?;
        let info = linalg::symmetrize(&(c.transpose() * &rinv * &c));
        let bbt = &b * b.transpose();
        let snap = Rc::new(Snapshot { a, b, bbt, c, rinv, info });
        self.cache.borrow_mut().insert(key, Rc::clone(&snap));
        Ok(snap)
    }
}

/// Sub-division of each grid cell into `k` equal integration substeps.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FineGrid {
    pub k: usize,
    pub hf: f64,
    pub n_fine: usize,
}

impl FineGrid {
    pub fn new(grid: &TimeGrid, opts: &SolverOptions) -> Self {
        let ratio = grid.h() / opts.max_substep;
        let k = if ratio.is_finite() && ratio > 1.0 { (ratio - 1e-9).ceil() as usize } else { 1 };
        FineGrid { k, hf: grid.h() / k as f64, n_fine: grid.n() * k }
    }

    pub fn time(&self, grid: &TimeGrid, j: usize) -> f64 {
        if j == self.n_fine {
            grid.t_end()
        } else {
            j as f64 * self.hf
        }
    }

    /// Midpoint of fine substep `j`, used to pick the coefficient cell.
    pub fn mid(&self, grid: &TimeGrid, j: usize) -> f64 {
        0.5 * (self.time(grid, j) + self.time(grid, j + 1))
    }
}

/// `E[X_{s_i}]` on the grid: `dm/dt = a(t) m`, fourth-order integration per
/// substep.
pub fn prior_mean_path(spec: &ModelSpec, grid: &TimeGrid, opts: &SolverOptions) -> Result<Vec<DVector<f64>>> {
    let coeffs = CoefficientCache::new(spec);
    let fine = FineGrid::new(grid, opts);
    let mut out = Vec::with_capacity(grid.n() + 1);
    let mut m = spec.initial.mean.clone();
    out.push(m.clone());
    for i in 0..grid.n() {
        for q in 0..fine.k {
            let j = i * fine.k + q;
            let snap = coeffs.at(fine.mid(grid, j))?;
            m = rk4_linear_vec(&snap.a, &m, fine.hf);
        }
        out.push(m.clone());
    }
    Ok(out)
}

/// RK4 step of `x' = A x` for constant `A`.
fn rk4_linear_vec(a: &Mat, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = a * x;
    let k2 = a * (x + &k1 * (0.5 * h));
    let k3 = a * (x + &k2 * (0.5 * h));
    let k4 = a * (x + &k3 * h);
    x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Builds a row-major matrix from nested rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidInput("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.iter().flatten().copied()))
}
