//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Embedding dimensions here are small (hundreds at most), where Jacobi is
//! simple, robust, and accurate to machine precision.

use ndarray::{Array1, Array2};

/// Eigenvalues and eigenvectors (as columns) of a symmetric matrix.
/// Panics if the input is not square.
pub fn symmetric_eig(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);

    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s
    };

    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    let tol = 1e-30 * scale;
    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let eigenvalues = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (eigenvalues, v)
}
