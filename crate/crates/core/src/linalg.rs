//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, SymmetricEigen};

pub type Mat = DMatrix<f64>;

pub(crate) fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
pub(crate) fn max_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetrizes `m`; if an eigenvalue falls below `-tol`, every negative
/// eigenvalue is projected to zero.
pub(crate) fn clip_psd(m: &Mat, tol: f64) -> Mat {
    let s = symmetrize(m);
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().all(|&l| l >= -tol) {
        return s;
    }
    rebuild(&eig, |l| l.max(0.0))
}

/// Mirror of [`clip_psd`] for negative semidefinite matrices.
pub(crate) fn clip_nsd(m: &Mat, tol: f64) -> Mat {
    let s = symmetrize(m);
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().all(|&l| l <= tol) {
        return s;
    }
    rebuild(&eig, |l| l.min(0.0))
}

fn rebuild(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> Mat {
    let q = &eig.eigenvectors;
    let d = Mat::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(q * d * q.transpose()))
}

/// Symmetric PSD square root by eigendecomposition; negative eigenvalues are
/// treated as zero.
pub fn psd_sqrt(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    rebuild(&eig, |l| l.max(0.0).sqrt())
}

/// Diagonal jitter used before inverting a filtering covariance.
pub(crate) fn jitter(m: &Mat) -> f64 {
    let d = m.nrows() as f64;
    1e-10 * (1.0 + m.trace().abs() / d)
}

/// Inverse of a symmetric PSD matrix after adding [`jitter`] to the diagonal.
pub(crate) fn inv_jittered(m: &Mat) -> Option<Mat> {
    let n = m.nrows();
    let reg = symmetrize(m) + Mat::identity(n, n) * jitter(m);
    match reg.clone().cholesky() {
        Some(ch) => Some(symmetrize(&ch.inverse())),
        None => reg.try_inverse(),
    }
}

/// Inverse of a symmetric positive definite matrix.
pub(crate) fn inv_spd(m: &Mat) -> Option<Mat> {
    let s = symmetrize(m);
    match s.clone().cholesky() {
        Some(ch) => Some(symmetrize(&ch.inverse())),
        None => s.try_inverse().map(|i| symmetrize(&i)),
    }
}

pub(crate) fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// One classical RK4 step of the matrix flow `M' = F(t) M`, `M(0) = I`, over
/// a step of length `h`, given the generator at the left end, midpoint and
/// right end.
pub(crate) fn rk4_transition(f0: &Mat, fm: &Mat, f1: &Mat, h: f64) -> Mat {
    let d = f0.nrows();
    let id = Mat::identity(d, d);
    let k1 = f0.clone();
    let k2 = fm * (&id + &k1 * (0.5 * h));
    let k3 = fm * (&id + &k2 * (0.5 * h));
    let k4 = f1 * (&id + &k3 * h);
    id + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Cubic Hermite midpoint from endpoint values and derivatives.
pub(crate) fn hermite_mid(y0: &Mat, y1: &Mat, d0: &Mat, d1: &Mat, h: f64) -> Mat {
    (y0 + y1) * 0.5 + (d0 - d1) * (h / 8.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&m);
        assert!((&r * &r - &m).norm() < 1e-12);
        assert!((psd_sqrt(&Mat::zeros(2, 2))).norm() == 0.0);
    }

    #[test]
    fn clipping_only_past_tolerance() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        assert_eq!(clip_psd(&m, 1e-8), m);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(min_eigenvalue(&clip_psd(&bad, 1e-8)) >= 0.0);
        let pos = Mat::from_row_slice(1, 1, &[1e-3]);
        assert_eq!(clip_nsd(&pos, 1e-8)[(0, 0)], 0.0);
    }

    #[test]
    fn scalar_rk4_transition_matches_exponential() {
        let k = Mat::from_element(1, 1, -0.7);
        let h = 0.01;
        let m = rk4_transition(&k, &k, &k, h);
        assert!((m[(0, 0)] - (-0.7 * h).exp()).abs() < 1e-10);
    }

    #[test]
    fn hermite_is_exact_for_cubics() {
        // y = t^3 on [0, 1]
        let y0 = Mat::from_element(1, 1, 0.0);
        let y1 = Mat::from_element(1, 1, 1.0);
        let d0 = Mat::from_element(1, 1, 0.0);
        let d1 = Mat::from_element(1, 1, 3.0);
        assert!((hermite_mid(&y0, &y1, &d0, &d1, 1.0)[(0, 0)] - 0.125).abs() < 1e-15);
    }
}
