use super::Scalar;
use crate::par::{self, Exec};

/// `out[n×q] = a[n×p] · b[p×q]`, row-major.
///
/// Each output row is accumulated in a fixed `k` order, so the result does not
/// depend on how rows are spread over workers.
pub fn gemm<S: Scalar>(exec: Exec, a: &[S], n: usize, p: usize, b: &[S], q: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), n * p);
    debug_assert_eq!(b.len(), p * q);
    let mut out = vec![S::zero(); n * q];
    par::for_each_row(exec, &mut out, q, |i, row| {
        let a_row = &a[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            // exact zeros are common after ReLU and dropout
            if aik == S::zero() {
                continue;
            }
            let b_row = &b[k * q..(k + 1) * q];
            for (o, &bkj) in row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    });
    out
}

pub(crate) fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
