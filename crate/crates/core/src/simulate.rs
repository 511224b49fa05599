//! Synthetic state and observation paths (Euler-Maruyama, left-point
//! coefficients) and the per-stream random number generators shared with the
//! sampler.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg;
use crate::model::{ModelSpec, ObservationPath, TimeGrid};

/// Deterministic generator for `(seed, stream_index)`. Streams of one seed
/// share the key and differ in the ChaCha stream id, so they never overlap.
pub fn rng_stream(seed: u64, stream_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_index);
    rng
}

pub(crate) fn standard_normal<R: rand::Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(rng)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub grid: TimeGrid,
    /// `X_{s_i}`, `i = 0..=n`.
    pub states: Vec<DVector<f64>>,
    pub observations: ObservationPath,
    pub seed: u64,
}

/// Simulates one path of the model. No validation is performed, so
/// degenerate noise (`b = 0`, `sigma = 0`) is allowed.
pub fn simulate(spec: &ModelSpec, grid: &TimeGrid, seed: u64) -> Result<SimulationOutput> {
    let mut rng = rng_stream(seed, 0);
    let h = grid.h();
    let sqrt_h = h.sqrt();
    let init_sqrt = linalg::psd_sqrt(&spec.initial.clipped_cov());
    let mut x = &spec.initial.mean + &init_sqrt * standard_normal(&mut rng, spec.dims.d1);
    let mut states = Vec::with_capacity(grid.n() + 1);
    let mut increments = Vec::with_capacity(grid.n());
    for i in 0..grid.n() {
        let t = grid.node(i);
        let (a, b) = (spec.a.eval(t)?, spec.b.eval(t)?);
        let (c, sigma) = (spec.c.eval(t)?, spec.sigma.eval(t)?);
        let dv = standard_normal(&mut rng, spec.dims.m1) * sqrt_h;
        let dw = standard_normal(&mut rng, spec.dims.m2) * sqrt_h;
        increments.push(&c * &x * h + sigma * dw);
        let next = &x + &a * &x * h + b * dv;
        states.push(std::mem::replace(&mut x, next));
    }
    states.push(x);
    let observations = ObservationPath::new(*grid, increments)?;
    Ok(SimulationOutput { grid: *grid, states, observations, seed })
}
