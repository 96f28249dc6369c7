//! Softmax and the fused softmax cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// Row-wise softmax in the numerically stable shifted form.
pub fn softmax<T: Real>(logits: &Mat<T>) -> Mat<T> {
    let mut out = logits.clone();
    let cols = logits.cols;
    for row in out.data_mut().chunks_mut(cols) {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean negative log-likelihood of the labeled class, with the gradient
/// (softmax - onehot)/n folded in.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Mat<T>,
    labels: &[usize],
) -> Result<(T, Mat<T>)> {
    if labels.len() != logits.rows {
        return Err(Error::data(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    let k = logits.cols;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::data(format!(
                "label {label} at row {i} out of range for {k} classes"
            )));
        }
    }
    let n = logits.rows;
    let inv_n = T::one() / T::of_f64(n as f64);
    let mut grad = softmax(logits);
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut total = T::zero();
        for &v in row {
            total += (v - max).exp();
        }
        let lse = max + total.ln();
        loss += lse - row[label];
        let g = grad.data_mut();
        g[i * k + label] -= T::one();
        for v in &mut g[i * k..(i + 1) * k] {
            *v *= inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
