//! `smoothkit` command-line front end.
//!
//! Exit codes: 0 success, 2 input or config error, 3 numerical failure,
//! 4 verification tolerance failure.

mod io;
mod verify;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smoothkit::{
    bf_smooth, confidence_band, direct_integral_smooth, estimate_functional, fixed_point_smooth, kalman_bucy,
    rts_smooth, sample_conditional_paths, simulate, validate_model, BandKind, Error, Functional, ModelSpec,
    ObservationPath, RiccatiField, SmoothingResult, SolverOptions, TimeGrid,
};

use crate::io::{mat_cells, mat_header, nums, read_observations, read_text, vec_header, Cell, Csv, Sink};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: if e.is_numerical() { 3 } else { 2 }, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(
    name = "smoothkit",
    version,
    about = "Continuous-time linear-Gaussian filtering, smoothing and path sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate states and observation increments.
    Simulate(Common),
    /// Kalman-Bucy filter means and covariances.
    Filter(Common),
    /// Smoothed means and covariances.
    Smooth(SmoothArgs),
    /// Draw conditional paths from the smoothing distribution.
    Sample(SampleArgs),
    /// Monte Carlo estimate of a path functional.
    Functional(FunctionalArgs),
    /// Pointwise or simultaneous confidence band.
    Band(BandArgs),
    /// Cross-check the solvers against each other and the discrete oracle.
    Verify(Common),
    /// Dump the Riccati solutions gamma, phi and w.
    Riccati(Common),
}

#[derive(Args)]
struct Common {
    /// Model file (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Horizon of the grid; defaults to the model horizon.
    #[arg(long)]
    t_end: Option<f64>,
    /// Number of grid cells.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.gz` is compressed. Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initial covariance regularization `V[X_0] + epsilon I`.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Observation CSV with `time` and `dy_k` columns; simulated from
    /// `--seed` when absent.
    #[arg(long)]
    obs: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Bf,
    Rts,
    Direct,
    FixedPoint,
}

#[derive(Args)]
struct SmoothArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Method::Bf)]
    method: Method,
    /// Query time for `--method fixed-point`; must be a grid node.
    #[arg(long)]
    at: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Number of conditional paths.
    #[arg(long, default_value_t = 1000)]
    paths: usize,
}

#[derive(Args)]
struct FunctionalArgs {
    #[command(flatten)]
    sample: SampleArgs,
    /// `max`, `integral`, `exceed` or `table` (with `--values`).
    #[arg(long, default_value = "max")]
    functional: String,
    /// State coordinate, 1-based.
    #[arg(long, default_value_t = 1)]
    coord: usize,
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    /// One value per path for the `table` functional.
    #[arg(long)]
    values: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pointwise,
    Simultaneous,
}

#[derive(Args)]
struct BandArgs {
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, default_value_t = 0.9)]
    level: f64,
    #[arg(long, value_enum, default_value_t = Kind::Simultaneous)]
    kind: Kind,
}

/// Model, grid and solver options shared by every command.
struct Setup {
    spec: ModelSpec,
    grid: TimeGrid,
    opts: SolverOptions,
}

impl Common {
    fn setup(&self) -> Result<Setup, CliError> {
        let text = read_text(&self.model)?;
        let spec = ModelSpec::from_json_str(&text)
            .map_err(|e| CliError::input(format!("{}: {e}", self.model.display())))?;
        if self.n == 0 {
            return Err(CliError::input("--n must be at least 1"));
        }
        let grid = TimeGrid::new(self.t_end.unwrap_or(spec.horizon), self.n)?;
        validate_model(&spec, &grid)
            .into_result()
            .map_err(|e| CliError::input(format!("{}: {e}", self.model.display())))?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::input(format!(
                "--epsilon {} must be finite and non-negative",
                self.epsilon
            )));
        }
        Ok(Setup { spec, grid, opts: SolverOptions::with_epsilon(self.epsilon) })
    }

    fn observations(&self, s: &Setup) -> Result<ObservationPath, CliError> {
        match &self.obs {
            Some(path) => read_observations(path, &s.grid, s.spec.dims.d2),
            None => Ok(simulate(&s.spec, &s.grid, self.seed)?.observations),
        }
    }

    fn emit(&self, content: &str) -> Result<(), CliError> {
        write_out(self.out.as_deref(), content)
    }
}

fn write_out(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    let mut sink = Sink::open(path)?;
    let fail = |e: std::io::Error| CliError::input(format!("write failed: {e}"));
    sink.write_all(content.as_bytes()).map_err(fail)?;
    sink.finish().map_err(fail)
}

fn cmd_simulate(c: &Common) -> Result<(), CliError> {
    let s = c.setup()?;
    let out = simulate(&s.spec, &s.grid, c.seed)?;
    let (d1, d2) = (s.spec.dims.d1, s.spec.dims.d2);
    let mut csv = Csv::new(&[vec!["time".into()], vec_header("x", d1), vec_header("dy", d2)].concat());
    for i in 0..=s.grid.n() {
        let time = std::iter::once(Cell::Num(s.grid.node(i)));
        let dy: Vec<Cell> = match out.observations.increments.get(i) {
            Some(v) => nums(v.iter()).collect(),
            None => (0..d2).map(|_| Cell::Empty).collect(),
        };
        csv.row(time.chain(nums(out.states[i].iter())).chain(dy));
    }
    c.emit(&csv.into_string())
}

fn cmd_filter(c: &Common) -> Result<(), CliError> {
    let s = c.setup()?;
    let obs = c.observations(&s)?;
    let f = kalman_bucy(&s.spec, &s.grid, &obs, &s.opts)?;
    let d = s.spec.dims.d1;
    let mut csv = Csv::new(&[vec!["time".into()], vec_header("mu", d), mat_header("gamma", d)].concat());
    for i in 0..=s.grid.n() {
        csv.row(
            std::iter::once(Cell::Num(s.grid.node(i)))
                .chain(nums(f.means[i].iter()))
                .chain(mat_cells(&f.covariances[i])),
        );
    }
    c.emit(&csv.into_string())
}

fn smoothing_csv(r: &SmoothingResult, d: usize) -> String {
    let mut header = [vec!["time".into()], vec_header("mu", d), mat_header("w", d)].concat();
    if r.rho.is_some() {
        header.extend(vec_header("rho", d));
    }
    let mut csv = Csv::new(&header);
    for i in 0..=r.grid.n() {
        let rho: Vec<Cell> = r.rho.as_ref().map(|rho| nums(rho[i].iter()).collect()).unwrap_or_default();
        csv.row(
            std::iter::once(Cell::Num(r.grid.node(i)))
                .chain(nums(r.means[i].iter()))
                .chain(mat_cells(&r.marginal_cov[i]))
                .chain(rho),
        );
    }
    csv.into_string()
}

fn cmd_smooth(a: &SmoothArgs) -> Result<(), CliError> {
    let c = &a.common;
    let s = c.setup()?;
    let obs = c.observations(&s)?;
    let d = s.spec.dims.d1;
    if a.at.is_some() && !matches!(a.method, Method::FixedPoint) {
        return Err(CliError::input("--at only applies to --method fixed-point"));
    }
    let result = match a.method {
        Method::Bf => bf_smooth(&s.spec, &s.grid, &obs, &s.opts)?,
        Method::Direct => direct_integral_smooth(&s.spec, &s.grid, &obs, &s.opts)?,
        Method::Rts => {
            let f = kalman_bucy(&s.spec, &s.grid, &obs, &s.opts)?;
            rts_smooth(&s.spec, &s.grid, &obs, &f, &s.opts).map_err(|e| {
                let hint = matches!(e, Error::SingularCovariance { .. });
                let mut err = CliError::from(e);
                if hint {
                    err.message.push_str(" (--method bf)");
                }
                err
            })?
        }
        Method::FixedPoint => {
            let t = a.at.ok_or_else(|| CliError::input("--method fixed-point needs --at <time>"))?;
            let node = grid_node(&s.grid, t)?;
            let fp = fixed_point_smooth(&s.spec, &s.grid, &obs, node, &s.opts)?;
            let mut csv = Csv::new(&[vec!["time".into()], vec_header("mu", d)].concat());
            for (t, m) in fp.times().iter().zip(&fp.means) {
                csv.row(std::iter::once(Cell::Num(*t)).chain(nums(m.iter())));
            }
            return c.emit(&csv.into_string());
        }
    };
    c.emit(&smoothing_csv(&result, d))
}

fn grid_node(grid: &TimeGrid, t: f64) -> Result<usize, CliError> {
    let out = || CliError::input(format!("--at {t} is not a node of the grid on [0, {}]", grid.t_end()));
    let i = grid.nearest_node(t).ok_or_else(out)?;
    if (grid.node(i) - t).abs() > 1e-6 * grid.h() {
        return Err(out());
    }
    Ok(i)
}

/// Sampler seed when the data were simulated from `seed`: keeps path 0 off
/// the data stream.
fn sampler_seed(c: &Common) -> u64 {
    if c.obs.is_some() {
        c.seed
    } else {
        c.seed.wrapping_add(1)
    }
}

fn draw(a: &SampleArgs) -> Result<(Setup, smoothkit::ConditionalPathBatch), CliError> {
    let c = &a.common;
    let s = c.setup()?;
    let obs = c.observations(&s)?;
    let bf = bf_smooth(&s.spec, &s.grid, &obs, &s.opts)?;
    let batch = sample_conditional_paths(&s.spec, &s.grid, &bf, a.paths, sampler_seed(c))?;
    Ok((s, batch))
}

fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    let (s, batch) = draw(a)?;
    let d = batch.dim;
    let mut csv = Csv::new(&[vec!["path_id".into(), "time".into()], vec_header("x", d)].concat());
    for p in 0..batch.m {
        let path = batch.path(p);
        for i in 0..=s.grid.n() {
            csv.row(
                [Cell::Int(p), Cell::Num(s.grid.node(i))].into_iter().chain(nums(&path[i * d..(i + 1) * d])),
            );
        }
    }
    a.common.emit(&csv.into_string())
}

fn cmd_functional(a: &FunctionalArgs) -> Result<(), CliError> {
    if a.coord == 0 {
        return Err(CliError::input("--coord is 1-based"));
    }
    let functional = if a.functional == "table" {
        let path =
            a.values.as_ref().ok_or_else(|| CliError::input("functional `table` needs --values <file>"))?;
        let values = read_text(path)?
            .split(|ch: char| ch.is_whitespace() || ch == ',')
            .filter(|tok| !tok.is_empty())
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| CliError::input(format!("{}: `{tok}` is not a number", path.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Functional::Table(values)
    } else {
        Functional::from_id(&a.functional, a.coord - 1, a.threshold)?
    };
    let (_, batch) = draw(&a.sample)?;
    let est = estimate_functional(&batch, &functional)?;
    let json = serde_json::json!({
        "value": est.value,
        "stderr": est.stderr,
        "M": est.m,
        "functional": est.functional,
    });
    a.sample.common.emit(&format!("{}\n", serde_json::to_string_pretty(&json).expect("json serializes")))
}

fn cmd_band(a: &BandArgs) -> Result<(), CliError> {
    let kind = match a.kind {
        Kind::Pointwise => BandKind::Pointwise,
        Kind::Simultaneous => BandKind::Simultaneous,
    };
    let (s, batch) = draw(&a.sample)?;
    let band = confidence_band(&batch, a.level, kind)?;
    let d = batch.dim;
    let mut csv = Csv::new(&[vec!["time".into()], vec_header("lower", d), vec_header("upper", d)].concat());
    for i in 0..=s.grid.n() {
        csv.row(
            std::iter::once(Cell::Num(s.grid.node(i)))
                .chain(nums(band.lower[i].iter()))
                .chain(nums(band.upper[i].iter())),
        );
    }
    a.sample.common.emit(&csv.into_string())
}

fn cmd_verify(c: &Common) -> Result<(), CliError> {
    let s = c.setup()?;
    if s.grid.n() < 2 || s.grid.n() % 2 != 0 {
        return Err(CliError::input(format!("verify needs an even --n >= 2, got {}", s.grid.n())));
    }
    let obs = c.observations(&s)?;
    let (report, passed) = verify::run(&s.spec, &s.grid, &obs, &s.opts)?;
    c.emit(&report)?;
    if passed {
        Ok(())
    } else {
        Err(CliError { code: 4, message: "verification failed".into() })
    }
}

fn cmd_riccati(c: &Common) -> Result<(), CliError> {
    let s = c.setup()?;
    let field = RiccatiField::compute(&s.spec, &s.grid, &s.opts)?;
    let d = s.spec.dims.d1;
    let mut csv = Csv::new(
        &[vec!["time".into()], mat_header("gamma", d), mat_header("phi", d), mat_header("w", d)].concat(),
    );
    for i in 0..=s.grid.n() {
        csv.row(
            std::iter::once(Cell::Num(s.grid.node(i)))
                .chain(mat_cells(&field.gamma[i]))
                .chain(mat_cells(&field.phi[i]))
                .chain(mat_cells(&field.w[i])),
        );
    }
    c.emit(&csv.into_string())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SMOOTHKIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::input(format!("SMOOTHKIT_THREADS={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::input(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Filter(c) => cmd_filter(c),
        Command::Smooth(a) => cmd_smooth(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Functional(a) => cmd_functional(a),
        Command::Band(a) => cmd_band(a),
        Command::Verify(c) => cmd_verify(c),
        Command::Riccati(c) => cmd_riccati(c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("smoothkit: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
