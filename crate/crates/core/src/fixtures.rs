//! Ready-made models used by the tests, benches and the `verify` command.

use nalgebra::DVector;

use crate::linalg::Mat;
use crate::model::{CoefficientProvider, Dims, InitialLaw, ModelSpec};

fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

/// Scalar model with constant coefficients on `[0, 1]`.
pub fn scalar_model(a: f64, b: f64, c: f64, sigma: f64, m0: f64, v0: f64) -> ModelSpec {
    ModelSpec {
        dims: Dims { d1: 1, d2: 1, m1: 1, m2: 1 },
        a: CoefficientProvider::constant(scalar(a)),
        b: CoefficientProvider::constant(scalar(b)),
        c: CoefficientProvider::constant(scalar(c)),
        sigma: CoefficientProvider::constant(scalar(sigma)),
        initial: InitialLaw::new(DVector::from_element(1, m0), scalar(v0)),
        horizon: 1.0,
    }
}

/// A constant hidden value observed in unit noise: `a = b = 0`, `c = sigma = 1`,
/// `X_0 ~ N(0, 1)`.
pub fn static_scalar() -> ModelSpec {
    scalar_model(0.0, 0.0, 1.0, 1.0, 0.0, 1.0)
}

/// Mean-reverting scalar benchmark.
pub fn scalar_benchmark() -> ModelSpec {
    scalar_model(-0.3, 0.6, 1.0, 0.8, 0.5, 0.4)
}

/// Damped oscillator driven through its velocity, position observed.
pub fn oscillator_2d() -> ModelSpec {
    ModelSpec {
        dims: Dims { d1: 2, d2: 1, m1: 1, m2: 1 },
        a: CoefficientProvider::constant(Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.3])),
        b: CoefficientProvider::constant(Mat::from_row_slice(2, 1, &[0.0, 0.5])),
        c: CoefficientProvider::constant(Mat::from_row_slice(1, 2, &[1.0, 0.0])),
        sigma: CoefficientProvider::constant(scalar(0.5)),
        initial: InitialLaw::new(
            DVector::from_vec(vec![1.0, 0.0]),
            Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        ),
        horizon: 1.0,
    }
}

/// Two-dimensional model whose drift and observation noise switch at `t = 0.5`.
pub fn switching_2d() -> ModelSpec {
    let times = vec![0.0, 0.5, 1.0];
    ModelSpec {
        dims: Dims { d1: 2, d2: 2, m1: 2, m2: 2 },
        a: CoefficientProvider::Table {
            times: times.clone(),
            values: vec![
                Mat::from_row_slice(2, 2, &[-0.5, 0.2, 0.0, -0.2]),
                Mat::from_row_slice(2, 2, &[-0.1, 0.0, 0.3, -0.6]),
            ],
        },
        b: CoefficientProvider::constant(Mat::from_row_slice(2, 2, &[0.4, 0.0, 0.1, 0.3])),
        c: CoefficientProvider::constant(Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0])),
        sigma: CoefficientProvider::Table {
            times,
            values: vec![
                Mat::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.9]),
                Mat::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.7]),
            ],
        },
        initial: InitialLaw::new(
            DVector::from_vec(vec![0.3, -0.2]),
            Mat::from_row_slice(2, 2, &[0.4, -0.05, -0.05, 0.6]),
        ),
        horizon: 1.0,
    }
}

impl ModelSpec {
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_initial(mut self, mean: DVector<f64>, cov: Mat) -> Self {
        self.initial = InitialLaw::new(mean, cov);
        self
    }

    /// Same model with the observation matrix replaced by zeros.
    pub fn without_observations(mut self) -> Self {
        let (d2, d1) = (self.dims.d2, self.dims.d1);
        self.c = CoefficientProvider::constant(Mat::zeros(d2, d1));
        self
    }
}
