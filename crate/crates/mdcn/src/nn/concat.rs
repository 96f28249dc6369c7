//! Channel concatenation and its gradient split.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape5, Tensor5};

/// Joins tensors along the channel axis, preserving part order.
pub fn concat_channels<T: Real>(parts: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat_channels needs at least one part"))?;
    let (n, d, h, w) = (first.shape.n, first.shape.d, first.shape.h, first.shape.w);
    let mut channels = 0usize;
    for p in parts {
        if (p.shape.n, p.shape.d, p.shape.h, p.shape.w) != (n, d, h, w) {
            return Err(Error::config(format!(
                "concat parts disagree outside the channel axis: {} vs {}",
                first.shape, p.shape
            )));
        }
        channels += p.shape.c;
    }
    let out_shape = Shape5::new(n, channels, d, h, w);
    let vol = out_shape.volume();
    let mut out = Tensor5::zeros(out_shape);
    let dst = out.data_mut();
    for bn in 0..n {
        let mut c_off = 0usize;
        for p in parts {
            let pc = p.shape.c;
            let src = &p.data()[bn * pc * vol..(bn + 1) * pc * vol];
            let base = (bn * channels + c_off) * vol;
            dst[base..base + pc * vol].copy_from_slice(src);
            c_off += pc;
        }
    }
    Ok(out)
}

/// Inverse of `concat_channels` for routing gradients back to the parts.
pub fn split_channels<T: Real>(x: &Tensor5<T>, widths: &[usize]) -> Result<Vec<Tensor5<T>>> {
    let total: usize = widths.iter().sum();
    if total != x.shape.c {
        return Err(Error::config(format!(
            "split widths sum to {total}, tensor has {} channels",
            x.shape.c
        )));
    }
    let vol = x.shape.volume();
    let n = x.shape.n;
    let mut parts: Vec<Tensor5<T>> = widths
        .iter()
        .map(|&c| Tensor5::zeros(Shape5::new(n, c, x.shape.d, x.shape.h, x.shape.w)))
        .collect();
    for bn in 0..n {
        let mut c_off = 0usize;
        for (part, &pc) in parts.iter_mut().zip(widths) {
            let base = (bn * x.shape.c + c_off) * vol;
            part.data_mut()[bn * pc * vol..(bn + 1) * pc * vol]
                .copy_from_slice(&x.data()[base..base + pc * vol]);
            c_off += pc;
        }
    }
    Ok(parts)
}
