use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::DVector;
use smoothkit::{Mat, ObservationPath, TimeGrid};

use crate::CliError;

/// Destination of a command's output; `.gz` paths are gzip-compressed.
pub enum Sink {
    Stdout(BufWriter<io::Stdout>),
    File(BufWriter<File>),
    Gzip(GzEncoder<BufWriter<File>>),
}

impl Sink {
    pub fn open(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Sink::Stdout(BufWriter::new(io::stdout())));
        };
        let file = File::create(path)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", path.display())))?;
        let inner = BufWriter::new(file);
        Ok(if is_gz(path) {
            Sink::Gzip(GzEncoder::new(inner, Compression::default()))
        } else {
            Sink::File(inner)
        })
    }

    pub fn finish(self) -> io::Result<()> {
        match self {
            Sink::Stdout(mut w) => w.flush(),
            Sink::File(mut w) => w.flush(),
            Sink::Gzip(w) => w.finish()?.flush(),
        }
    }
}

impl Write for Sink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Sink::Stdout(w) => w.write(buf),
            Sink::File(w) => w.write(buf),
            Sink::Gzip(w) => w.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Sink::Stdout(w) => w.flush(),
            Sink::File(w) => w.flush(),
            Sink::Gzip(w) => w.flush(),
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads a whole text file, transparently gunzipping `.gz` paths.
pub fn read_text(path: &Path) -> Result<String, CliError> {
    let file =
        File::open(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let mut text = String::new();
    let res = if is_gz(path) {
        GzDecoder::new(file).read_to_string(&mut text)
    } else {
        BufReader::new(file).read_to_string(&mut text)
    };
    res.map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(text)
}

/// CSV rows built in memory; numbers use the shortest round-trip form so
/// output is byte-stable.
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[String]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Csv { buf }
    }

    pub fn row(&mut self, cells: impl IntoIterator<Item = Cell>) {
        let mut first = true;
        for cell in cells {
            if !first {
                self.buf.push(',');
            }
            first = false;
            match cell {
                Cell::Num(x) => write!(self.buf, "{x}").unwrap(),
                Cell::Int(k) => write!(self.buf, "{k}").unwrap(),
                Cell::Empty => {}
            }
        }
        self.buf.push('\n');
    }

    pub fn into_string(self) -> String {
        self.buf
    }
}

pub enum Cell {
    Num(f64),
    Int(usize),
    Empty,
}

pub fn nums<'a>(xs: impl IntoIterator<Item = &'a f64> + 'a) -> impl Iterator<Item = Cell> + 'a {
    xs.into_iter().map(|&x| Cell::Num(x))
}

/// Row-major entries of a matrix.
pub fn mat_cells(m: &Mat) -> impl Iterator<Item = Cell> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| Cell::Num(m[(i, j)])))
}

/// `prefix_1, .., prefix_d`
pub fn vec_header(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("{prefix}_{k}")).collect()
}

/// `prefix_i_j`, row-major, 1-based.
pub fn mat_header(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).flat_map(|i| (1..=d).map(move |j| format!("{prefix}_{i}_{j}"))).collect()
}

/// Reads observation increments from a CSV with `time` and `dy_k` columns,
/// such as the output of `simulate`. Rows whose `dy` cells are empty (the
/// terminal row) are skipped; the rest must match the grid node by node.
pub fn read_observations(path: &PathBuf, grid: &TimeGrid, d2: usize) -> Result<ObservationPath, CliError> {
    let text = read_text(path)?;
    let bad = |msg: String| CliError::input(format!("{}: {msg}", path.display()));
    let mut lines =
        BufReader::new(text.as_bytes()).lines().map_while(Result::ok).filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let time_col = header.iter().position(|h| h == "time").ok_or_else(|| bad("no `time` column".into()))?;
    let dy_cols: Vec<usize> = (1..=d2)
        .map(|k| {
            let name = format!("dy_{k}");
            header.iter().position(|h| *h == name).ok_or_else(|| bad(format!("no `{name}` column")))
        })
        .collect::<Result<_, _>>()?;
    let mut increments = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(bad(format!(
                "row {} has {} cells, header has {}",
                line_no + 1,
                cells.len(),
                header.len()
            )));
        }
        if dy_cols.iter().all(|&c| cells[c].is_empty()) {
            continue;
        }
        let parse = |c: usize| {
            cells[c]
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", line_no + 1, cells[c])))
        };
        let i = increments.len();
        let t = parse(time_col)?;
        if i <= grid.n() && (t - grid.node(i)).abs() > 1e-9 * grid.t_end() {
            return Err(bad(format!(
                "row {} at time {t} but grid node {i} is at {}",
                line_no + 1,
                grid.node(i)
            )));
        }
        let dy = dy_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>, _>>()?;
        increments.push(DVector::from_vec(dy));
    }
    if increments.len() != grid.n() {
        return Err(bad(format!(
            "{} observation increments for a grid of {} cells",
            increments.len(),
            grid.n()
        )));
    }
    ObservationPath::new(*grid, increments).map_err(CliError::from)
}
