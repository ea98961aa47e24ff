//! Small dense helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute difference when `b` is zero.
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base == 0.0 {
        diff
    } else {
        diff / base
    }
}

pub fn rel_vec(a: &Vector, b: &Vector) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base == 0.0 {
        diff
    } else {
        diff / base
    }
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )))
    }
}

pub fn ensure_len(v: &Vector, len: usize, what: &str) -> Result<()> {
    if v.len() == len {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} has length {}, expected {len}",
            v.len()
        )))
    }
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vector {
    Vector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Entries i.i.d. uniform on `(-bound, bound)`.
pub fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let dist = Uniform::new(-bound, bound).expect("bound must be positive and finite");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Orthonormal `rows x cols` matrix (requires `cols <= rows`) drawn from the
/// Haar measure via QR of a Gaussian matrix with sign correction.
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    assert!(cols <= rows, "cannot draw {cols} orthonormal columns in R^{rows}");
    let g = gaussian_matrix(rows, cols, 1.0, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// `U diag(s) Vᵀ` for thin factors.
pub fn compose(u: &Matrix, s: &Vector, v: &Matrix) -> Matrix {
    let mut us = u.clone();
    for (j, sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(*sj);
    }
    us * v.transpose()
}

/// Orthogonal projector onto the column span of an orthonormal basis.
pub fn projector(basis: &Matrix) -> Matrix {
    basis * basis.transpose()
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
