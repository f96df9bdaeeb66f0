//! Dense linear-algebra helpers shared by the spectral and dynamics modules.

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;

/// Row/column threshold below which the hand-rolled Gauss-Jordan inverse is
/// used; larger matrices go through faer's LU.
const SMALL_INVERSE_LIMIT: usize = 96;

pub(crate) fn nd_to_faer(a: &Array2<C64>) -> Mat<C64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn frobenius(a: &Array2<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with the offending pivot index and value when a pivot is not
/// strictly positive.
pub(crate) fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>, (usize, f64)> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return Err((j, d));
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` in place for each column of `b`, `L` real lower triangular.
pub(crate) fn solve_lower_real(l: &Array2<f64>, b: &mut Array2<C64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * b[[k, c]];
            }
            b[[i, c]] = s / l[[i, i]];
        }
    }
}

/// Solves `Lᵀ x = b` in place for each column of `b`, `L` real lower triangular.
pub(crate) fn solve_lower_transpose_real(l: &Array2<f64>, b: &mut Array2<C64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = b[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * b[[k, c]];
            }
            b[[i, c]] = s / l[[i, i]];
        }
    }
}

/// Solves `C x = b` for a vector `b` given the lower Cholesky factor of `C`.
pub(crate) fn solve_spd_vec(l: &Array2<f64>, b: &Array1<C64>) -> Array1<C64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Dense complex inverse. Returns `None` when the matrix is numerically
/// singular.
pub(crate) fn inverse(a: &Array2<C64>) -> Option<Array2<C64>> {
    let n = a.nrows();
    if n <= SMALL_INVERSE_LIMIT {
        inverse_gauss_jordan(a)
    } else {
        let m = nd_to_faer(a);
        let inv = m.partial_piv_lu().inverse();
        let out = Array2::from_shape_fn((n, n), |(i, j)| inv[(i, j)]);
        out.iter().all(|z| z.is_finite()).then_some(out)
    }
}

fn inverse_gauss_jordan(a: &Array2<C64>) -> Option<Array2<C64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::<C64>::eye(n);
    for col in 0..n {
        let mut piv = col;
        let mut piv_mag = m[[col, col]].norm();
        for r in (col + 1)..n {
            let mag = m[[r, col]].norm();
            if mag > piv_mag {
                piv = r;
                piv_mag = mag;
            }
        }
        if piv_mag == 0.0 || !piv_mag.is_finite() {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap([col, c], [piv, c]);
                inv.swap([col, c], [piv, c]);
            }
        }
        let d = m[[col, col]];
        for c in 0..n {
            m[[col, c]] /= d;
            inv[[col, c]] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[[r, col]];
            if f == C64::new(0.0, 0.0) {
                continue;
            }
            for c in 0..n {
                let mc = m[[col, c]];
                let ic = inv[[col, c]];
                m[[r, c]] -= f * mc;
                inv[[r, c]] -= f * ic;
            }
        }
    }
    Some(inv)
}
