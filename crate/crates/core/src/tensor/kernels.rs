//! Raw numeric kernels behind the graph operations. No shape checking here;
//! callers validate before dispatch.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::scalar::Scalar;

pub(crate) fn view<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("kernel view shape")
}

fn view_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("kernel view shape")
}

/// `out (m×n) = a·b` or `out += a·b` when `accumulate`.
pub(crate) fn matmul_into<T: Scalar>(
    out: &mut [T],
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    accumulate: bool,
) {
    let (m, n) = (a.nrows(), b.ncols());
    let beta = if accumulate { T::one() } else { T::zero() };
    general_mat_mul(T::one(), &a, &b, beta, &mut view_mut(out, m, n));
}

/// Causal im2col: `cols[(c·k + j), t] = x[c, t + j − (k − 1)]`, zero where the
/// source index falls left of the series start.
pub(crate) fn causal_im2col<T: Scalar>(x: &[T], channels: usize, len: usize, k: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); channels * k * len];
    for c in 0..channels {
        let src = &x[c * len..(c + 1) * len];
        for j in 0..k {
            let shift = k - 1 - j;
            if shift >= len {
                continue;
            }
            let row = &mut cols[(c * k + j) * len..(c * k + j + 1) * len];
            row[shift..].copy_from_slice(&src[..len - shift]);
        }
    }
    cols
}

/// Adjoint of [`causal_im2col`]: scatters column gradients back onto the input.
pub(crate) fn causal_col2im<T: Scalar>(
    dcols: &[T],
    dx: &mut [T],
    channels: usize,
    len: usize,
    k: usize,
) {
    for c in 0..channels {
        let dst = &mut dx[c * len..(c + 1) * len];
        for j in 0..k {
            let shift = k - 1 - j;
            if shift >= len {
                continue;
            }
            let row = &dcols[(c * k + j) * len..(c * k + j + 1) * len];
            for (d, &g) in dst[..len - shift].iter_mut().zip(&row[shift..]) {
                *d += g;
            }
        }
    }
}

/// The `k` most recent input columns flattened channel-major, left-padded with
/// zeros when the series is shorter than the kernel.
pub(crate) fn causal_tail<T: Scalar>(x: &[T], channels: usize, len: usize, k: usize) -> Vec<T> {
    let mut tail = vec![T::zero(); channels * k];
    for c in 0..channels {
        for j in 0..k {
            // source time index: len - k + j
            if len + j >= k {
                tail[c * k + j] = x[c * len + len + j - k];
            }
        }
    }
    tail
}

pub(crate) fn causal_tail_adjoint<T: Scalar>(
    dtail: &[T],
    dx: &mut [T],
    channels: usize,
    len: usize,
    k: usize,
) {
    for c in 0..channels {
        for j in 0..k {
            if len + j >= k {
                dx[c * len + len + j - k] += dtail[c * k + j];
            }
        }
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
