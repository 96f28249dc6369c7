//! Shared oracles for integration tests: central finite differences, a
//! direct-summation reference convolution with a multiply-add counter, and
//! an enumerating shape oracle. These stay independent of the library's
//! im2col/GEMM implementation path.

use mdcn::tensor::{ConvSpec, Shape5, Tensor5};

/// Central finite differences of a scalar function, step h, in f64.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &mut Vec<f64>, h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        return (a - b).abs();
    }
    (a - b).abs() / scale
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Direct-summation convolution over the zero-padded input. Every
/// multiply-add, including those against padded zeros, bumps the counter;
/// the count per output element is exactly in_channels * kernel volume.
pub fn naive_conv3d(
    x: &Tensor5<f64>,
    w: &Tensor5<f64>,
    spec: &ConvSpec,
) -> (Tensor5<f64>, u64) {
    let out_shape = spec.out_shape(x.shape).expect("valid spec");
    assert_eq!(w.shape, spec.weight_shape());
    let mut out = Tensor5::zeros(out_shape);
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let mut macs = 0u64;
    for n in 0..out_shape.n {
        for co in 0..out_shape.c {
            for od in 0..out_shape.d {
                for oh in 0..out_shape.h {
                    for ow in 0..out_shape.w {
                        let mut acc = 0.0f64;
                        for ci in 0..x.shape.c {
                            for kd in 0..kt {
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let id = (od * st + kd) as isize - pt as isize;
                                        let ih = (oh * sh + ki) as isize - ph as isize;
                                        let iw = (ow * sw + kj) as isize - pw as isize;
                                        let v = if id >= 0
                                            && ih >= 0
                                            && iw >= 0
                                            && (id as usize) < x.shape.d
                                            && (ih as usize) < x.shape.h
                                            && (iw as usize) < x.shape.w
                                        {
                                            x.at(n, ci, id as usize, ih as usize, iw as usize)
                                        } else {
                                            0.0
                                        };
                                        acc += v * w.at(co, ci, kd, ki, kj);
                                        macs += 1;
                                    }
                                }
                            }
                        }
                        out.set(n, co, od, oh, ow, acc);
                    }
                }
            }
        }
    }
    (out, macs)
}

/// Multiply-add count of a convolution by loop enumeration, without data.
pub fn enumerate_conv_macs(input: Shape5, spec: &ConvSpec) -> u64 {
    let out = spec.out_shape(input).expect("valid spec");
    let (kt, kh, kw) = spec.kernel;
    let mut macs = 0u64;
    for _n in 0..out.n {
        for _co in 0..out.c {
            for _od in 0..out.d {
                for _oh in 0..out.h {
                    for _ow in 0..out.w {
                        macs += (input.c * kt * kh * kw) as u64;
                    }
                }
            }
        }
    }
    macs
}

/// Output extent found by scanning window placements instead of the formula.
pub fn enumerate_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = input + 2 * pad;
    let mut count = 0usize;
    let mut start = 0usize;
    while start + kernel <= padded {
        count += 1;
        start += stride;
    }
    count
}

/// Deterministic pseudo-random f64 in (-0.5, 0.5) for building test tensors.
pub fn hash_noise(seed: u64, i: usize) -> f64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add((i as u64).wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z as f64 / u64::MAX as f64) - 0.5
}
