//! Conditional path sampling and Monte Carlo summaries.
//!
//! Given `Y_{0..T}`, `X_s = mu_{s;T} + xi_{s;T}` in law, where `xi` is the
//! Gaussian process
//!
//! ```text
//! d xi_s = (a + b b^T phi(s;T)) xi_s ds + b dV_s,   xi_0 ~ N(0, V[xi_0])
//! ```
//!
//! Paths are generated by Euler-Maruyama on the smoother's grid with
//! left-node coefficients. Path `m` draws from `rng_stream(seed, m)`, so a
//! batch does not depend on how paths are scheduled across threads.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{CoefficientCache, ModelSpec, TimeGrid};
use crate::riccati::error_drift;
use crate::simulate::{rng_stream, standard_normal};
use crate::smoother::SmoothingResult;

/// Variances at or below this are treated as zero when standardizing.
const DEGENERATE_VAR: f64 = 1e-14;
/// Smallest batch accepted by [`confidence_band`].
pub const MIN_BAND_PATHS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPathBatch {
    pub grid: TimeGrid,
    pub dim: usize,
    pub seed: u64,
    /// Number of paths.
    pub m: usize,
    /// Path `p`, node `i`, coordinate `k` at `(p * (n + 1) + i) * dim + k`.
    pub data: Vec<f64>,
    /// `mu_{s_i;T}`
    pub mean: Vec<DVector<f64>>,
    /// Diagonal of `w(s_i;T)`.
    pub variance: Vec<DVector<f64>>,
}

impl ConditionalPathBatch {
    fn stride(&self) -> usize {
        (self.grid.n() + 1) * self.dim
    }

    /// Path `p` as a flat `(n + 1) * dim` slice.
    pub fn path(&self, p: usize) -> &[f64] {
        let s = self.stride();
        &self.data[p * s..(p + 1) * s]
    }

    pub fn value(&self, p: usize, i: usize, k: usize) -> f64 {
        self.data[(p * (self.grid.n() + 1) + i) * self.dim + k]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.stride())
    }
}

/// Draws `m` paths from the smoothing distribution. Needs a result that
/// carries its Riccati field (Bryson-Frazier or direct-integral).
pub fn sample_conditional_paths(
    spec: &ModelSpec,
    grid: &TimeGrid,
    smoothing: &SmoothingResult,
    m: usize,
    seed: u64,
) -> Result<ConditionalPathBatch> {
    let field = smoothing.field.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "sampling needs a smoother result with its Riccati field, got {}",
            smoothing.method.name()
        ))
    })?;
    if !grid.same_as(&smoothing.grid) {
        return Err(Error::GridMismatch("smoother ran on a different grid".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("path count must be positive".into()));
    }
    let n = grid.n();
    let d = spec.dims.d1;
    let h = grid.h();
    let coeffs = CoefficientCache::new(spec);
    let mut steps = Vec::with_capacity(n);
    let mut kicks = Vec::with_capacity(n);
    for i in 0..n {
        let snap = coeffs.at(grid.node(i))?;
        steps.push(Mat::identity(d, d) + error_drift(&snap, &field.phi[i]) * h);
        kicks.push(&snap.b * h.sqrt());
    }
    let init = linalg::psd_sqrt(&field.xi0_cov);
    let m1 = spec.dims.m1;
    let means = &smoothing.means;

    let stride = (n + 1) * d;
    let mut data = vec![0.0; m * stride];
    data.par_chunks_mut(stride).enumerate().for_each(|(p, out)| {
        let mut rng = rng_stream(seed, p as u64);
        let mut xi = &init * standard_normal(&mut rng, d);
        for i in 0..=n {
            for k in 0..d {
                out[i * d + k] = means[i][k] + xi[k];
            }
            if i < n {
                let z = standard_normal(&mut rng, m1);
                xi = &steps[i] * xi + &kicks[i] * z;
            }
        }
    });

    Ok(ConditionalPathBatch {
        grid: *grid,
        dim: d,
        seed,
        m,
        data,
        mean: means.clone(),
        variance: field.w.iter().map(|w| w.diagonal()).collect(),
    })
}

/// A scalar function of a path.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    /// `max_i X_{s_i}[coord]`
    Max { coord: usize },
    /// Trapezoidal `int_0^T X_s[coord] ds`.
    Integral { coord: usize },
    /// `1{X_{s_i}[coord] > threshold for some i}`
    Exceedance { coord: usize, threshold: f64 },
    /// One externally computed value per path.
    Table(Vec<f64>),
}

impl Functional {
    /// Builds a built-in functional from its id: `max`, `integral` or
    /// `exceed`.
    pub fn from_id(id: &str, coord: usize, threshold: f64) -> Result<Self> {
        match id {
            "max" | "max-coordinate" => Ok(Functional::Max { coord }),
            "integral" => Ok(Functional::Integral { coord }),
            "exceed" | "threshold-exceedance" => Ok(Functional::Exceedance { coord, threshold }),
            other => Err(Error::UnknownFunctional(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Functional::Max { .. } => "max",
            Functional::Integral { .. } => "integral",
            Functional::Exceedance { .. } => "exceed",
            Functional::Table(_) => "table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalEstimate {
    pub value: f64,
    pub stderr: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub functional: String,
}

/// Sample mean and `std / sqrt(M)` (zero for a single path). Welford's
/// update keeps a constant sample at exactly zero spread.
pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let (mut mean, mut ss) = (0.0, 0.0);
    for (k, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        ss += delta * (v - mean);
    }
    let m = values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (ss / (m - 1.0) / m).sqrt())
}

pub fn estimate_functional(
    batch: &ConditionalPathBatch,
    functional: &Functional,
) -> Result<FunctionalEstimate> {
    if batch.m == 0 {
        return Err(Error::InvalidInput("empty path batch".into()));
    }
    let d = batch.dim;
    let check_coord = |coord: usize| {
        if coord >= d {
            Err(Error::InvalidInput(format!("coordinate {coord} out of range for d1={d}")))
        } else {
            Ok(())
        }
    };
    let h = batch.grid.h();
    let values: Vec<f64> = match functional {
        Functional::Max { coord } => {
            check_coord(*coord)?;
            batch
                .paths()
                .map(|p| p.iter().skip(*coord).step_by(d).copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        }
        Functional::Integral { coord } => {
            check_coord(*coord)?;
            batch
                .paths()
                .map(|p| {
                    let xs: Vec<f64> = p.iter().skip(*coord).step_by(d).copied().collect();
                    xs.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum()
                })
                .collect()
        }
        Functional::Exceedance { coord, threshold } => {
            check_coord(*coord)?;
            batch
                .paths()
                .map(|p| {
                    let hit = p.iter().skip(*coord).step_by(d).any(|&x| x > *threshold);
                    if hit {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Functional::Table(values) => {
            if values.len() != batch.m {
                return Err(Error::InvalidInput(format!(
                    "table holds {} values for {} paths",
                    values.len(),
                    batch.m
                )));
            }
            values.clone()
        }
    };
    let (value, stderr) = mean_and_stderr(&values);
    Ok(FunctionalEstimate { value, stderr, m: batch.m, functional: functional.id().to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandKind {
    Pointwise,
    Simultaneous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBand {
    pub grid: TimeGrid,
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
    pub level: f64,
    pub kind: BandKind,
}

impl ConfidenceBand {
    /// Fraction of the batch's paths lying inside the band at every node.
    pub fn containment(&self, batch: &ConditionalPathBatch) -> Result<f64> {
        if !self.grid.same_as(&batch.grid) {
            return Err(Error::GridMismatch("band and batch grids differ".into()));
        }
        let d = batch.dim;
        let inside = batch
            .paths()
            .filter(|p| {
                p.iter().enumerate().all(|(idx, &x)| {
                    let (i, k) = (idx / d, idx % d);
                    x >= self.lower[i][k] && x <= self.upper[i][k]
                })
            })
            .count();
        Ok(inside as f64 / batch.m as f64)
    }
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn node_scale(var: f64) -> f64 {
    if var > DEGENERATE_VAR {
        var.sqrt()
    } else {
        1.0
    }
}

/// Pointwise band: per-node quantiles at `(1 -+ level) / 2`. Simultaneous
/// band: `mu +- q sqrt(diag w)` with `q` the empirical `level`-quantile of
/// the largest standardized deviation along each path.
pub fn confidence_band(batch: &ConditionalPathBatch, level: f64, kind: BandKind) -> Result<ConfidenceBand> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidInput(format!("band level {level} outside [0, 1)")));
    }
    if batch.m < MIN_BAND_PATHS {
        return Err(Error::InvalidInput(format!(
            "confidence bands need at least {MIN_BAND_PATHS} paths, got {}",
            batch.m
        )));
    }
    let n = batch.grid.n();
    let d = batch.dim;
    let (lower, upper) = match kind {
        BandKind::Pointwise => {
            let per_node: Vec<(DVector<f64>, DVector<f64>)> = (0..=n)
                .into_par_iter()
                .map(|i| {
                    let mut lo = DVector::zeros(d);
                    let mut hi = DVector::zeros(d);
                    for k in 0..d {
                        let mut xs: Vec<f64> = (0..batch.m).map(|p| batch.value(p, i, k)).collect();
                        xs.sort_by(f64::total_cmp);
                        lo[k] = quantile_sorted(&xs, 0.5 * (1.0 - level));
                        hi[k] = quantile_sorted(&xs, 0.5 * (1.0 + level));
                    }
                    (lo, hi)
                })
                .collect();
            per_node.into_iter().unzip()
        }
        BandKind::Simultaneous => {
            let mut sup: Vec<(f64, usize)> = batch
                .paths()
                .enumerate()
                .map(|(p, path)| {
                    let dev = path.iter().enumerate().fold(0.0f64, |acc, (idx, &x)| {
                        let (i, k) = (idx / d, idx % d);
                        acc.max((x - batch.mean[i][k]).abs() / node_scale(batch.variance[i][k]))
                    });
                    (dev, p)
                })
                .collect();
            sup.sort_by(|a, b| a.0.total_cmp(&b.0));
            let rank =
                if level == 0.0 { 0 } else { ((level * batch.m as f64).ceil() as usize).clamp(1, batch.m) };
            let q = if rank == 0 { 0.0 } else { sup[rank - 1].0 };
            let (mut lower, mut upper): (Vec<_>, Vec<_>) = (0..=n)
                .map(|i| {
                    let half = batch.variance[i].map(|v| q * node_scale(v));
                    (&batch.mean[i] - &half, &batch.mean[i] + half)
                })
                .unzip();
            // Rebuilding mu +- q scale can round inside the paths that define
            // q; widening by that rounding keeps all `rank` of them contained.
            for &(_, p) in &sup[..rank] {
                for (idx, &x) in batch.path(p).iter().enumerate() {
                    let (i, k) = (idx / d, idx % d);
                    lower[i][k] = lower[i][k].min(x);
                    upper[i][k] = upper[i][k].max(x);
                }
            }
            (lower, upper)
        }
    };
    Ok(ConfidenceBand { grid: batch.grid, lower, upper, level, kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{scalar_benchmark, scalar_model};
    use crate::riccati::SolverOptions;
    use crate::simulate::simulate;
    use crate::smoother::{bf_smooth, rts_smooth};

    fn batch_for(spec: &ModelSpec, n: usize, m: usize, seed: u64) -> ConditionalPathBatch {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let obs = simulate(spec, &grid, 11).unwrap().observations;
        let sm = bf_smooth(spec, &grid, &obs, &SolverOptions::default()).unwrap();
        sample_conditional_paths(spec, &grid, &sm, m, seed).unwrap()
    }

    #[test]
    fn degenerate_error_process_reproduces_mean() {
        let spec = scalar_model(-0.4, 0.0, 1.0, 1.0, 0.3, 0.0);
        let batch = batch_for(&spec, 10, 5, 1);
        for p in 0..5 {
            for i in 0..=10 {
                assert_eq!(batch.value(p, i, 0), batch.mean[i][0]);
            }
        }
        let est = estimate_functional(&batch, &Functional::Max { coord: 0 }).unwrap();
        assert_eq!(est.stderr, 0.0);
        let top = batch.mean.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(est.value, top);
    }

    #[test]
    fn same_seed_same_batch() {
        let spec = scalar_benchmark();
        assert_eq!(batch_for(&spec, 20, 50, 4), batch_for(&spec, 20, 50, 4));
        assert_ne!(batch_for(&spec, 20, 50, 4), batch_for(&spec, 20, 50, 5));
    }

    #[test]
    fn rts_result_cannot_drive_sampler() {
        let spec = scalar_benchmark();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let obs = simulate(&spec, &grid, 1).unwrap().observations;
        let opts = SolverOptions::default();
        let f = crate::filter::kalman_bucy(&spec, &grid, &obs, &opts).unwrap();
        let rts = rts_smooth(&spec, &grid, &obs, &f, &opts).unwrap();
        assert!(sample_conditional_paths(&spec, &grid, &rts, 10, 0).is_err());
    }

    #[test]
    fn functional_edge_cases() {
        let batch = batch_for(&scalar_benchmark(), 10, 200, 2);
        let all = Functional::Exceedance { coord: 0, threshold: f64::NEG_INFINITY };
        let est = estimate_functional(&batch, &all).unwrap();
        assert_eq!((est.value, est.stderr), (1.0, 0.0));
        assert!(estimate_functional(&batch, &Functional::Max { coord: 1 }).is_err());
        assert!(estimate_functional(&batch, &Functional::Table(vec![1.0; 3])).is_err());
        let table = estimate_functional(&batch, &Functional::Table(vec![2.0; 200])).unwrap();
        assert_eq!((table.value, table.stderr), (2.0, 0.0));
        assert!(matches!(Functional::from_id("median", 0, 0.0), Err(Error::UnknownFunctional(_))));
    }

    #[test]
    fn integral_of_constant_path() {
        let spec = scalar_model(0.0, 0.0, 1.0, 1.0, 1.5, 0.0);
        let batch = batch_for(&spec, 8, 3, 0);
        let est = estimate_functional(&batch, &Functional::Integral { coord: 0 }).unwrap();
        assert!((est.value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn band_conventions() {
        let batch = batch_for(&scalar_benchmark(), 10, 1001, 3);
        let median = confidence_band(&batch, 0.0, BandKind::Pointwise).unwrap();
        assert_eq!(median.lower, median.upper);
        let mut xs: Vec<f64> = (0..1001).map(|p| batch.value(p, 4, 0)).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(median.lower[4][0], xs[500]);
        let sim = confidence_band(&batch, 0.9, BandKind::Simultaneous).unwrap();
        assert!(sim.containment(&batch).unwrap() >= 0.9);
        let pw = confidence_band(&batch, 0.9, BandKind::Pointwise).unwrap();
        for i in 0..=10 {
            assert!(pw.lower[i][0] <= pw.upper[i][0]);
            assert!(sim.lower[i][0] <= pw.lower[i][0] + 1e-12);
        }
        let small = batch_for(&scalar_benchmark(), 10, 99, 3);
        assert!(confidence_band(&small, 0.9, BandKind::Pointwise).is_err());
        assert!(confidence_band(&batch, 1.0, BandKind::Pointwise).is_err());
    }
}
