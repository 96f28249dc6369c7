//! 3-D convolution forward and backward via im2col + GEMM.
//!
//! The degenerate kernel shapes kt x 1 x 1 and 1 x ks x ks realize the 1-D
//! (temporal) and 2-D (spatial) branches; the general kt x ks x ks case is
//! the 3-D branch. Batch entries are processed in parallel, but every
//! per-element reduction runs in a fixed order, so outputs are bit-identical
//! for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Real, Shape5, Tensor5};

/// Column-buffer budget in elements; slabs of output frames are sized to fit.
const COL_BUDGET: usize = 1 << 22;

struct ConvGeom {
    in_c: usize,
    in_d: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_d: usize,
    out_h: usize,
    out_w: usize,
    k: (usize, usize, usize),
    s: (usize, usize, usize),
    p: (usize, usize, usize),
    field: usize,
    frames_per_slab: usize,
}

impl ConvGeom {
    fn new(x: Shape5, spec: &ConvSpec) -> Result<Self> {
        let out = spec.out_shape(x)?;
        let field = spec.field_len();
        let cols_per_frame = out.h * out.w;
        let frames_per_slab = (COL_BUDGET / (field * cols_per_frame).max(1))
            .clamp(1, out.d);
        Ok(ConvGeom {
            in_c: x.c,
            in_d: x.d,
            in_h: x.h,
            in_w: x.w,
            out_c: out.c,
            out_d: out.d,
            out_h: out.h,
            out_w: out.w,
            k: spec.kernel,
            s: spec.stride,
            p: spec.padding,
            field,
            frames_per_slab,
        })
    }

    fn out_volume(&self) -> usize {
        self.out_d * self.out_h * self.out_w
    }
}

/// Output positions along one axis whose source index lands inside the input.
fn valid_range(out_extent: usize, offset: isize, stride: usize, limit: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi = if (limit as isize) <= offset {
        0
    } else {
        ((limit as isize - offset) as usize).div_ceil(stride)
    };
    (lo.min(out_extent), hi.min(out_extent))
}

/// Fills `col` (field x slab_cols, row-major) with the receptive fields of
/// output frames [od0, od1). Field rows are ordered (ci, kd, ki, kj) to match
/// the weight layout.
fn im2col_slab<T: Real>(x_n: &[T], g: &ConvGeom, od0: usize, od1: usize, col: &mut [T]) {
    let cols = (od1 - od0) * g.out_h * g.out_w;
    debug_assert_eq!(col.len(), g.field * cols);
    let (kt, kh, kw) = g.k;
    let (st, sh, sw) = g.s;
    let (pt, ph, pw) = g.p;
    let mut row = 0usize;
    for ci in 0..g.in_c {
        for kd in 0..kt {
            for ki in 0..kh {
                for kj in 0..kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let off_w = kj as isize - pw as isize;
                    let (w_lo, w_hi) = valid_range(g.out_w, off_w, sw, g.in_w);
                    let mut idx = 0usize;
                    for od in od0..od1 {
                        let id = (od * st + kd) as isize - pt as isize;
                        if id < 0 || id >= g.in_d as isize {
                            dst[idx..idx + g.out_h * g.out_w].fill(T::zero());
                            idx += g.out_h * g.out_w;
                            continue;
                        }
                        let plane = ((ci * g.in_d + id as usize) * g.in_h) * g.in_w;
                        for oh in 0..g.out_h {
                            let ih = (oh * sh + ki) as isize - ph as isize;
                            if ih < 0 || ih >= g.in_h as isize {
                                dst[idx..idx + g.out_w].fill(T::zero());
                                idx += g.out_w;
                                continue;
                            }
                            let src_row = plane + ih as usize * g.in_w;
                            let seg = &mut dst[idx..idx + g.out_w];
                            seg[..w_lo].fill(T::zero());
                            seg[w_hi.max(w_lo)..].fill(T::zero());
                            if w_lo < w_hi {
                                if sw == 1 {
                                    let src0 = (src_row as isize + w_lo as isize + off_w) as usize;
                                    seg[w_lo..w_hi]
                                        .copy_from_slice(&x_n[src0..src0 + (w_hi - w_lo)]);
                                } else {
                                    for ow in w_lo..w_hi {
                                        let iw = (ow * sw) as isize + off_w;
                                        seg[ow] = x_n[src_row + iw as usize];
                                    }
                                }
                            }
                            idx += g.out_w;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` (field x slab_cols) back into the input gradient.
/// Contributions that fell on padding are dropped.
fn col2im_slab<T: Real>(col: &[T], g: &ConvGeom, od0: usize, od1: usize, gx_n: &mut [T]) {
    let cols = (od1 - od0) * g.out_h * g.out_w;
    let (kt, kh, kw) = g.k;
    let (st, sh, sw) = g.s;
    let (pt, ph, pw) = g.p;
    let mut row = 0usize;
    for ci in 0..g.in_c {
        for kd in 0..kt {
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let off_w = kj as isize - pw as isize;
                    let (w_lo, w_hi) = valid_range(g.out_w, off_w, sw, g.in_w);
                    let mut idx = 0usize;
                    for od in od0..od1 {
                        let id = (od * st + kd) as isize - pt as isize;
                        if id < 0 || id >= g.in_d as isize {
                            idx += g.out_h * g.out_w;
                            continue;
                        }
                        let plane = ((ci * g.in_d + id as usize) * g.in_h) * g.in_w;
                        for oh in 0..g.out_h {
                            let ih = (oh * sh + ki) as isize - ph as isize;
                            if ih < 0 || ih >= g.in_h as isize {
                                idx += g.out_w;
                                continue;
                            }
                            let dst_row = plane + ih as usize * g.in_w;
                            for ow in w_lo..w_hi {
                                let iw = (ow * sw) as isize + off_w;
                                gx_n[dst_row + iw as usize] += src[idx + ow];
                            }
                            idx += g.out_w;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_weight<T: Real>(w: &Tensor5<T>, spec: &ConvSpec) -> Result<()> {
    if w.shape != spec.weight_shape() {
        return Err(Error::config(format!(
            "weight shape {} does not match spec {}",
            w.shape,
            spec.weight_shape()
        )));
    }
    Ok(())
}

/// Zero-padded 3-D convolution, no bias.
pub fn conv3d_forward<T: Real>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    check_weight(w, spec)?;
    let g = ConvGeom::new(x.shape, spec)?;
    let out_shape = spec.out_shape(x.shape)?;
    let mut out = Tensor5::zeros(out_shape);
    let s_total = g.out_volume();
    let in_per_batch = x.shape.per_batch();
    let out_per_batch = out_shape.per_batch();
    let wd = w.data();

    let x_data = x.data();
    out.data_mut()
        .par_chunks_mut(out_per_batch)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x_data[n * in_per_batch..(n + 1) * in_per_batch];
            let mut col = vec![T::zero(); g.field * g.frames_per_slab * g.out_h * g.out_w];
            let mut od0 = 0;
            while od0 < g.out_d {
                let od1 = (od0 + g.frames_per_slab).min(g.out_d);
                let cols = (od1 - od0) * g.out_h * g.out_w;
                im2col_slab(x_n, &g, od0, od1, &mut col[..g.field * cols]);
                let j0 = od0 * g.out_h * g.out_w;
                T::gemm(
                    g.out_c,
                    g.field,
                    cols,
                    T::one(),
                    wd,
                    g.field as isize,
                    1,
                    &col[..g.field * cols],
                    cols as isize,
                    1,
                    T::zero(),
                    &mut out_n[j0..],
                    s_total as isize,
                    1,
                );
                od0 = od1;
            }
        });
    Ok(out)
}

fn check_grad_out<T: Real>(
    x_shape: Shape5,
    spec: &ConvSpec,
    grad_out: &Tensor5<T>,
) -> Result<Shape5> {
    let out_shape = spec.out_shape(x_shape)?;
    if grad_out.shape != out_shape {
        return Err(Error::config(format!(
            "grad_out shape {} does not match forward output {}",
            grad_out.shape, out_shape
        )));
    }
    Ok(out_shape)
}

/// Gradient with respect to the convolution input.
pub fn conv3d_grad_input<T: Real>(
    input_shape: Shape5,
    w: &Tensor5<T>,
    spec: &ConvSpec,
    grad_out: &Tensor5<T>,
) -> Result<Tensor5<T>> {
    check_weight(w, spec)?;
    let out_shape = check_grad_out(input_shape, spec, grad_out)?;
    let g = ConvGeom::new(input_shape, spec)?;
    let s_total = g.out_volume();
    let in_per_batch = input_shape.per_batch();
    let out_per_batch = out_shape.per_batch();
    let wd = w.data();
    let go_data = grad_out.data();

    let mut grad_x = Tensor5::zeros(input_shape);
    grad_x
        .data_mut()
        .par_chunks_mut(in_per_batch)
        .enumerate()
        .for_each(|(n, gx_n)| {
            let go_n = &go_data[n * out_per_batch..(n + 1) * out_per_batch];
            let mut col = vec![T::zero(); g.field * g.frames_per_slab * g.out_h * g.out_w];
            let mut od0 = 0;
            while od0 < g.out_d {
                let od1 = (od0 + g.frames_per_slab).min(g.out_d);
                let cols = (od1 - od0) * g.out_h * g.out_w;
                let j0 = od0 * g.out_h * g.out_w;
                // w^T (field x out_c) * grad_out slab (out_c x cols)
                T::gemm(
                    g.field,
                    g.out_c,
                    cols,
                    T::one(),
                    wd,
                    1,
                    g.field as isize,
                    &go_n[j0..],
                    s_total as isize,
                    1,
                    T::zero(),
                    &mut col[..g.field * cols],
                    cols as isize,
                    1,
                );
                col2im_slab(&col[..g.field * cols], &g, od0, od1, gx_n);
                od0 = od1;
            }
        });
    Ok(grad_x)
}

/// Gradient with respect to the convolution weights.
pub fn conv3d_grad_weights<T: Real>(
    x: &Tensor5<T>,
    spec: &ConvSpec,
    grad_out: &Tensor5<T>,
) -> Result<Tensor5<T>> {
    let out_shape = check_grad_out(x.shape, spec, grad_out)?;
    let g = ConvGeom::new(x.shape, spec)?;
    let s_total = g.out_volume();
    let in_per_batch = x.shape.per_batch();
    let out_per_batch = out_shape.per_batch();
    let x_data = x.data();
    let go_data = grad_out.data();

    // Per-batch partials, reduced in batch order afterwards so the
    // accumulation order is independent of scheduling.
    let partials: Vec<Vec<T>> = (0..x.shape.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x_data[n * in_per_batch..(n + 1) * in_per_batch];
            let go_n = &go_data[n * out_per_batch..(n + 1) * out_per_batch];
            let mut col = vec![T::zero(); g.field * g.frames_per_slab * g.out_h * g.out_w];
            let mut gw_n = vec![T::zero(); g.out_c * g.field];
            let mut od0 = 0;
            while od0 < g.out_d {
                let od1 = (od0 + g.frames_per_slab).min(g.out_d);
                let cols = (od1 - od0) * g.out_h * g.out_w;
                let j0 = od0 * g.out_h * g.out_w;
                im2col_slab(x_n, &g, od0, od1, &mut col[..g.field * cols]);
                // grad_out slab (out_c x cols) * col^T (cols x field)
                T::gemm(
                    g.out_c,
                    cols,
                    g.field,
                    T::one(),
                    &go_n[j0..],
                    s_total as isize,
                    1,
                    &col[..g.field * cols],
                    1,
                    cols as isize,
                    T::one(),
                    &mut gw_n,
                    g.field as isize,
                    1,
                );
                od0 = od1;
            }
            gw_n
        })
        .collect();

    let mut grad_w = Tensor5::zeros(spec.weight_shape());
    let gw = grad_w.data_mut();
    for partial in &partials {
        for (dst, &src) in gw.iter_mut().zip(partial) {
            *dst += src;
        }
    }
    Ok(grad_w)
}

/// Analytic gradients of `conv3d_forward` with respect to input and weights.
pub fn conv3d_backward<T: Real>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    spec: &ConvSpec,
    grad_out: &Tensor5<T>,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    let grad_x = conv3d_grad_input(x.shape, w, spec, grad_out)?;
    let grad_w = conv3d_grad_weights(x, spec, grad_out)?;
    Ok((grad_x, grad_w))
}
