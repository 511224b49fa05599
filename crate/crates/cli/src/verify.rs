use std::fmt::Write as _;

use smoothkit::oracle::{discrete_kalman_rts, discretize};
use smoothkit::{
    bf_smooth, direct_integral_smooth, fixed_point_smooth, kalman_bucy, rts_smooth, Error, Mat, ModelSpec,
    ObservationPath, SolverOptions, TimeGrid,
};

use crate::CliError;

pub const MEAN_TRIAD_TOL: f64 = 1e-9;
pub const RTS_TOL: f64 = 1e-7;
pub const FIXED_POINT_TOL: f64 = 1e-6;
pub const TERMINAL_TOL: f64 = 1e-6;
pub const PSD_TOL: f64 = -1e-7;
pub const RATIO_RANGE: (f64, f64) = (1.7, 2.3);
/// Below this both errors are rounding noise and the ratio means nothing.
pub const NEGLIGIBLE: f64 = 1e-9;

enum Outcome {
    Pass,
    Fail,
    Skip(String),
}

struct Report {
    text: String,
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, detail: String, outcome: Outcome) {
        let tag = match &outcome {
            Outcome::Pass => "PASS".to_string(),
            Outcome::Fail => {
                self.failed += 1;
                "FAIL".to_string()
            }
            Outcome::Skip(why) => format!("SKIP ({why})"),
        };
        writeln!(self.text, "{name:<26} {detail:<44} {tag}").unwrap();
    }

    fn bound(&mut self, name: &str, value: f64, tol: f64) {
        let ok = value <= tol;
        self.line(name, format!("{value:.3e} <= {tol:.0e}"), if ok { Outcome::Pass } else { Outcome::Fail });
    }
}

fn max_vec_gap(a: &[nalgebra::DVector<f64>], b: &[nalgebra::DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn max_mat_gap(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Gaps between the continuous solvers and the discrete oracle on one grid.
struct OracleGaps {
    filter: f64,
    mean: f64,
    cov: f64,
}

fn oracle_gaps(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    opts: &SolverOptions,
) -> Result<OracleGaps, Error> {
    let f = kalman_bucy(spec, grid, obs, opts)?;
    let bf = bf_smooth(spec, grid, obs, opts)?;
    let est = discrete_kalman_rts(&discretize(spec, grid)?, obs)?;
    Ok(OracleGaps {
        filter: max_vec_gap(&f.means, &est.filter_means),
        mean: max_vec_gap(&bf.means, &est.smoothed_means),
        cov: max_mat_gap(&bf.marginal_cov, &est.smoothed_covs),
    })
}

/// Runs the verification suite on `obs` (on `grid`, `n` even) and its
/// two-fold coarsening. Returns the report and whether every check passed.
pub fn run(
    spec: &ModelSpec,
    grid: &TimeGrid,
    obs: &ObservationPath,
    opts: &SolverOptions,
) -> Result<(String, bool), CliError> {
    let n = grid.n();
    let mut rep = Report { text: String::new(), failed: 0 };
    writeln!(rep.text, "verification on t_end = {}, n = {} and n = {}", grid.t_end(), n / 2, n).unwrap();

    let f = kalman_bucy(spec, grid, obs, opts)?;
    let bf = bf_smooth(spec, grid, obs, opts)?;
    let direct = direct_integral_smooth(spec, grid, obs, opts)?;
    rep.bound("bf vs direct mean", max_vec_gap(&bf.means, &direct.means), MEAN_TRIAD_TOL);

    match rts_smooth(spec, grid, obs, &f, opts) {
        Ok(rts) => rep.bound("bf vs rts mean", max_vec_gap(&bf.means, &rts.means), RTS_TOL),
        Err(Error::SingularCovariance { node, .. }) => {
            rep.line("bf vs rts mean", "-".into(), Outcome::Skip(format!("gamma singular at node {node}")))
        }
        Err(e) => return Err(e.into()),
    }

    let mut fp_gap: f64 = 0.0;
    for s in [0, n / 2, n] {
        let fp = fixed_point_smooth(spec, grid, obs, s, opts)?;
        fp_gap = fp_gap.max((fp.terminal() - &bf.means[s]).amax());
    }
    rep.bound("fixed-point vs bf", fp_gap, FIXED_POINT_TOL);

    let field = bf.field.as_ref().expect("bf carries its field");
    let (w_t, g_t) = (&field.w[n], &field.gamma[n]);
    let scale = if g_t.norm() > 0.0 { g_t.norm() } else { 1.0 };
    rep.bound("w(T) vs gamma(T), rel", (w_t - g_t).norm() / scale, TERMINAL_TOL);

    let gap = field.min_information_gap();
    let ok = gap >= PSD_TOL;
    rep.line(
        "min eig gamma - w",
        format!("{gap:.3e} >= {PSD_TOL:.0e}"),
        if ok { Outcome::Pass } else { Outcome::Fail },
    );

    let coarse_grid = TimeGrid::new(grid.t_end(), n / 2)?;
    let coarse = oracle_gaps(spec, &coarse_grid, &obs.coarsen(2)?, opts)?;
    let fine = oracle_gaps(spec, grid, obs, opts)?;
    for (name, e1, e2) in [
        ("oracle filter mean", coarse.filter, fine.filter),
        ("oracle smoother mean", coarse.mean, fine.mean),
        ("oracle smoother cov", coarse.cov, fine.cov),
    ] {
        let (lo, hi) = RATIO_RANGE;
        if e1 <= NEGLIGIBLE && e2 <= NEGLIGIBLE {
            rep.line(name, format!("{e1:.3e} -> {e2:.3e}, both <= {NEGLIGIBLE:.0e}"), Outcome::Pass);
        } else {
            let ratio = e1 / e2;
            let ok = (lo..=hi).contains(&ratio);
            rep.line(
                name,
                format!("{e1:.3e} -> {e2:.3e}, ratio {ratio:.3}"),
                if ok { Outcome::Pass } else { Outcome::Fail },
            );
        }
    }

    let passed = rep.failed == 0;
    writeln!(
        rep.text,
        "{}",
        if passed { "all checks passed".to_string() } else { format!("{} check(s) failed", rep.failed) }
    )
    .unwrap();
    Ok((rep.text, passed))
}
