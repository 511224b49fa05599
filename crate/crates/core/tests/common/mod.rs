#![allow(dead_code)]

use nalgebra::DVector;
use smoothkit::fixtures::{oscillator_2d, scalar_benchmark, switching_2d};
use smoothkit::{Mat, ModelSpec};

pub fn test_models() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("scalar_benchmark", scalar_benchmark()),
        ("oscillator_2d", oscillator_2d()),
        ("switching_2d", switching_2d()),
    ]
}

pub fn max_vec_gap(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

pub fn max_mat_gap(a: &[Mat], b: &[Mat]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

pub fn min_eig(m: &Mat) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

pub fn max_eig(m: &Mat) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().max()
}
