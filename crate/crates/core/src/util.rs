//! Small shared numeric helpers: parameter flattening and initialization.

use ndarray::{Array1, Array2};
use rand::Rng;

pub(crate) fn push_arr2(out: &mut Vec<f64>, a: &Array2<f64>) {
    out.extend(a.iter().copied());
}

pub(crate) fn push_arr1(out: &mut Vec<f64>, a: &Array1<f64>) {
    out.extend(a.iter().copied());
}

pub(crate) fn take_arr2(src: &mut &[f64], rows: usize, cols: usize) -> Array2<f64> {
    let n = rows * cols;
    let (head, tail) = src.split_at(n);
    *src = tail;
    Array2::from_shape_vec((rows, cols), head.to_vec()).expect("shape from split")
}

pub(crate) fn take_arr1(src: &mut &[f64], len: usize) -> Array1<f64> {
    let (head, tail) = src.split_at(len);
    *src = tail;
    Array1::from_vec(head.to_vec())
}

/// Glorot-uniform weight matrix.
pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}
