//! ReLU. The subgradient at exactly zero is defined as zero.

use crate::tensor::{Real, Tensor5};

pub fn relu_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Masks the upstream gradient where the forward input was <= 0.
pub fn relu_backward<T: Real>(x: &Tensor5<T>, grad_out: &Tensor5<T>) -> Tensor5<T> {
    debug_assert_eq!(x.shape, grad_out.shape);
    let mut gx = grad_out.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    gx
}
