//! Thread-count independent products against large propagation matrices.
//!
//! Every output entry is accumulated in a fixed order, so running inside a
//! larger rayon pool changes wall time but never the bits of the result.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// `a * b` with `a` n×m (column-major, typically n×n) and `b` m×c.
pub fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.nrows());
    let n = a.nrows();
    let cols: Vec<Vec<f64>> = (0..b.ncols())
        .into_par_iter()
        .map(|c| {
            let mut out = vec![0.0; n];
            for (j, &w) in b.column(c).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, &x) in out.iter_mut().zip(a.column(j).iter()) {
                    *o += w * x;
                }
            }
            out
        })
        .collect();
    assemble(n, cols)
}

/// `aᵀ * b` without materializing the transpose.
pub fn tr_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let rows: Vec<Vec<f64>> = (0..a.ncols())
        .into_par_iter()
        .map(|i| {
            let ai = a.column(i);
            b.column_iter().map(|bc| ai.dot(&bc)).collect()
        })
        .collect();
    DMatrix::from_fn(a.ncols(), b.ncols(), |i, c| rows[i][c])
}

/// `vᵀ * b` as a row of length `b.ncols()`.
pub fn vec_tr_mul(v: &DVector<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(b.ncols(), b.column_iter().map(|col| v.dot(&col)))
}

/// Frobenius inner product ⟨a, b⟩ accumulated column by column.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let partial: Vec<f64> = a
        .as_slice()
        .par_chunks(a.nrows().max(1))
        .zip(b.as_slice().par_chunks(b.nrows().max(1)))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn assemble(n: usize, cols: Vec<Vec<f64>>) -> DMatrix<f64> {
    let c = cols.len();
    let mut data = Vec::with_capacity(n * c);
    for col in cols {
        data.extend(col);
    }
    DMatrix::from_vec(n, c, data)
}
