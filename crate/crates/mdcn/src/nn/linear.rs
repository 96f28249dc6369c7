//! Fully connected layer: y = x * w^T + b.

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

pub fn linear_forward<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &[T]) -> Result<Mat<T>> {
    if w.cols != x.cols || b.len() != w.rows {
        return Err(Error::config(format!(
            "linear shapes disagree: x {}x{}, w {}x{}, b {}",
            x.rows,
            x.cols,
            w.rows,
            w.cols,
            b.len()
        )));
    }
    let (n, f, out) = (x.rows, x.cols, w.rows);
    let mut y = Mat::zeros(n, out);
    for row in y.data_mut().chunks_mut(out) {
        row.copy_from_slice(b);
    }
    T::gemm(
        n,
        f,
        out,
        T::one(),
        x.data(),
        f as isize,
        1,
        w.data(), // w^T view: element (i, j) = w[j, i]
        1,
        f as isize,
        T::one(),
        y.data_mut(),
        out as isize,
        1,
    );
    Ok(y)
}

pub fn linear_backward<T: Real>(
    x: &Mat<T>,
    w: &Mat<T>,
    grad_out: &Mat<T>,
) -> Result<(Mat<T>, Mat<T>, Vec<T>)> {
    if grad_out.rows != x.rows || grad_out.cols != w.rows {
        return Err(Error::config("grad_out shape does not match linear output"));
    }
    let (n, f, out) = (x.rows, x.cols, w.rows);

    let mut grad_x = Mat::zeros(n, f);
    T::gemm(
        n,
        out,
        f,
        T::one(),
        grad_out.data(),
        out as isize,
        1,
        w.data(),
        f as isize,
        1,
        T::zero(),
        grad_x.data_mut(),
        f as isize,
        1,
    );

    let mut grad_w = Mat::zeros(out, f);
    T::gemm(
        out,
        n,
        f,
        T::one(),
        grad_out.data(), // g^T view
        1,
        out as isize,
        x.data(),
        f as isize,
        1,
        T::zero(),
        grad_w.data_mut(),
        f as isize,
        1,
    );

    let mut grad_b = vec![T::zero(); out];
    for row in grad_out.data().chunks(out) {
        for (b, &g) in grad_b.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((grad_x, grad_w, grad_b))
}
