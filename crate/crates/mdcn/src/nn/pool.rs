//! Max pooling over (frames, rows, columns) windows and global average
//! pooling down to one value per channel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{blocked_sum, Mat, PoolSpec, Real, Shape5, Tensor5};

/// Window maximum per output cell. Padded cells are treated as -inf and never
/// selected; ties resolve to the lowest flat input index. The returned map
/// holds, for every output element, the flat index of its source element.
pub fn maxpool3d_apply<T: Real>(
    x: &Tensor5<T>,
    spec: &PoolSpec,
) -> Result<(Tensor5<T>, Vec<usize>)> {
    let out_shape = spec.out_shape(x.shape)?;
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;

    // Valid in-bounds span of each window, per axis. A window with no valid
    // cell would select from padding only, which is a configuration error.
    let axis_spans = |out: usize, k: usize, s: usize, p: usize, limit: usize| -> Result<Vec<(usize, usize)>> {
        (0..out)
            .map(|o| {
                let start = (o * s) as isize - p as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + k as isize).min(limit as isize)) as usize;
                if lo >= hi {
                    Err(Error::config(format!(
                        "pool window at output index {o} lies entirely in padding"
                    )))
                } else {
                    Ok((lo, hi))
                }
            })
            .collect()
    };
    let d_spans = axis_spans(out_shape.d, kt, st, pt, x.shape.d)?;
    let h_spans = axis_spans(out_shape.h, kh, sh, ph, x.shape.h)?;
    let w_spans = axis_spans(out_shape.w, kw, sw, pw, x.shape.w)?;

    let mut y = Tensor5::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.len()];
    let xd = x.data();
    let in_vol = x.shape.volume();
    let (in_h, in_w) = (x.shape.h, x.shape.w);
    let out_vol = out_shape.volume();

    y.data_mut()
        .par_chunks_mut(out_vol)
        .zip(argmax.par_chunks_mut(out_vol))
        .enumerate()
        .for_each(|(nc, (ys, args))| {
            let base = nc * in_vol; // x and y share the (n, c) ordering
            let mut o = 0usize;
            for &(d0, d1) in &d_spans {
                for &(h0, h1) in &h_spans {
                    for &(w0, w1) in &w_spans {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for id in d0..d1 {
                            for ih in h0..h1 {
                                let row = base + (id * in_h + ih) * in_w;
                                for iw in w0..w1 {
                                    let v = xd[row + iw];
                                    if v > best {
                                        best = v;
                                        best_idx = row + iw;
                                    }
                                }
                            }
                        }
                        ys[o] = best;
                        args[o] = best_idx;
                        o += 1;
                    }
                }
            }
        });
    Ok((y, argmax))
}

/// Routes each upstream element to the input cell its maximum came from.
pub fn maxpool3d_backward<T: Real>(
    input_shape: Shape5,
    argmax: &[usize],
    grad_out: &Tensor5<T>,
) -> Result<Tensor5<T>> {
    if argmax.len() != grad_out.shape.len() {
        return Err(Error::config(
            "argmax map length does not match grad_out shape",
        ));
    }
    let mut gx = Tensor5::zeros(input_shape);
    let g = gx.data_mut();
    for (&idx, &up) in argmax.iter().zip(grad_out.data()) {
        g[idx] += up;
    }
    Ok(gx)
}

/// Mean over (frames, rows, columns), one value per (batch, channel).
pub fn global_avg_pool<T: Real>(x: &Tensor5<T>) -> Mat<T> {
    let vol = x.shape.volume();
    let inv = T::one() / T::of_f64(vol as f64);
    let mut out = Mat::zeros(x.shape.n, x.shape.c);
    for (slot, block) in out.data_mut().iter_mut().zip(x.data().chunks(vol)) {
        *slot = blocked_sum(block) * inv;
    }
    out
}

/// Spreads the upstream gradient uniformly over each pooled volume.
pub fn global_avg_pool_backward<T: Real>(input_shape: Shape5, grad_out: &Mat<T>) -> Tensor5<T> {
    let vol = input_shape.volume();
    let inv = T::one() / T::of_f64(vol as f64);
    let mut gx = Tensor5::zeros(input_shape);
    for (block, &g) in gx.data_mut().chunks_mut(vol).zip(grad_out.data()) {
        let v = g * inv;
        block.fill(v);
    }
    gx
}
