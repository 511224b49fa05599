//! Continuous-time linear-Gaussian state estimation.
//!
//! The crate covers the full pipeline for models of the form
//! `dX = a X dt + b dV`, `dY = c X dt + sigma dW`:
//!
//! * [`riccati`]: forward/backward Riccati solvers, smoothing covariance and
//!   error-drift propagators,
//! * [`filter`]: the Kalman-Bucy filter,
//! * [`smoother`]: Bryson-Frazier, Rauch-Tung-Striebel, fixed-point and
//!   direct-integral smoothers,
//! * [`sampler`]: conditional path sampling, Monte Carlo functionals and
//!   confidence bands,
//! * [`oracle`]: exact discrete-time references used for verification,
//! * [`simulate`]: synthetic ground truth.

pub mod config;
pub mod error;
pub mod filter;
pub mod fixtures;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod riccati;
pub mod sampler;
pub mod simulate;
pub mod smoother;

pub use error::{Error, Result};
pub use filter::{innovations, kalman_bucy, FilterResult};
pub use linalg::Mat;
pub use model::{
    prior_mean_path, validate_model, CoefficientProvider, Dims, InitialLaw, ModelSpec, ObservationPath,
    TimeGrid, ValidationReport,
};
pub use riccati::{
    build_propagator, cross_covariance, smoothing_w, solve_gamma_forward, solve_phi_backward, xi0_covariance,
    DriftFamily, Propagator, RiccatiField, SolverOptions,
};
pub use sampler::{
    confidence_band, estimate_functional, sample_conditional_paths, BandKind, ConditionalPathBatch,
    ConfidenceBand, Functional, FunctionalEstimate,
};
pub use simulate::{rng_stream, simulate, SimulationOutput};
pub use smoother::{
    bf_smooth, direct_integral_smooth, fixed_point_smooth, rts_smooth, FixedPointResult, SmootherMethod,
    SmoothingResult,
};
