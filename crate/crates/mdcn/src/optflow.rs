//! Dense optical flow for the motion stream: Horn-Schunck estimation with
//! Jacobi sweeps that solve each pixel's 2x2 system exactly, which makes the
//! discrete energy non-increasing from sweep to sweep.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::config(format!(
                "image data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.w + j] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Clamped lookup, replicating the border.
    #[inline]
    fn at_clamped(&self, i: isize, j: isize) -> f32 {
        let ii = i.clamp(0, self.h as isize - 1) as usize;
        let jj = j.clamp(0, self.w as isize - 1) as usize;
        self.data[ii * self.w + jj]
    }
}

/// Per-pixel displacement in pixels/frame: `u` horizontal, `v` vertical.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
        }
    }
}

/// Horn-Schunck settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsConfig {
    /// Smoothness weight.
    pub alpha: f32,
    /// Number of Jacobi sweeps.
    pub iterations: usize,
    /// 3x3 box-blur passes applied to both frames before differentiation.
    pub presmooth_passes: usize,
}

impl Default for HsConfig {
    fn default() -> Self {
        HsConfig {
            alpha: 1.0,
            iterations: 100,
            presmooth_passes: 1,
        }
    }
}

impl HsConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("horn-schunck alpha must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("horn-schunck needs at least one iteration"));
        }
        Ok(())
    }
}

/// ITU-R 601 luma from an interleaved RGB frame with values in [0, 1].
pub fn to_grayscale(frame: &[f32], h: usize, w: usize) -> Result<Image> {
    if frame.len() != h * w * 3 {
        return Err(Error::config(format!(
            "expected {h}x{w}x3 interleaved frame, got {} values",
            frame.len()
        )));
    }
    let data = frame
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
        .collect();
    Image { h, w, data }
}

fn box_blur(img: &Image) -> Image {
    let mut out = Image::zeros(img.h, img.w);
    for i in 0..img.h {
        for j in 0..img.w {
            let mut acc = 0.0f32;
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    acc += img.at_clamped(i as isize + di, j as isize + dj);
                }
            }
            out.set(i, j, acc / 9.0);
        }
    }
    out
}

struct Derivatives {
    ix: Vec<f32>,
    iy: Vec<f32>,
    it: Vec<f32>,
}

/// Spatial derivatives by central differences on the frame average, temporal
/// by the forward difference, after pre-smoothing.
fn derivatives(prev: &Image, next: &Image, cfg: &HsConfig) -> Derivatives {
    let mut a = prev.clone();
    let mut b = next.clone();
    for _ in 0..cfg.presmooth_passes {
        a = box_blur(&a);
        b = box_blur(&b);
    }
    let (h, w) = (a.h, a.w);
    let n = h * w;
    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    let mut it = vec![0.0f32; n];
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let gx = |img: &Image| {
                (img.at_clamped(i as isize, j as isize + 1)
                    - img.at_clamped(i as isize, j as isize - 1))
                    / 2.0
            };
            let gy = |img: &Image| {
                (img.at_clamped(i as isize + 1, j as isize)
                    - img.at_clamped(i as isize - 1, j as isize))
                    / 2.0
            };
            ix[idx] = 0.5 * (gx(&a) + gx(&b));
            iy[idx] = 0.5 * (gy(&a) + gy(&b));
            it[idx] = b.at(i, j) - a.at(i, j);
        }
    }
    Derivatives { ix, iy, it }
}

#[inline]
fn neighbor_sums(field: &[f32], h: usize, w: usize, i: usize, j: usize) -> (f32, u32) {
    let idx = i * w + j;
    let mut count = 0u32;
    let mut vertical = 0.0f32;
    if i > 0 {
        vertical += field[idx - w];
        count += 1;
    }
    if i + 1 < h {
        vertical += field[idx + w];
        count += 1;
    }
    let mut horizontal = 0.0f32;
    if j > 0 {
        horizontal += field[idx - 1];
        count += 1;
    }
    if j + 1 < w {
        horizontal += field[idx + 1];
        count += 1;
    }
    (vertical + horizontal, count)
}

/// Dense flow from `prev` to `next`, minimizing the brightness-constancy
/// plus alpha^2-weighted smoothness energy. Deterministic for a fixed
/// configuration; the output contains no NaN or infinity for finite input.
pub fn horn_schunck(prev: &Image, next: &Image, cfg: &HsConfig) -> Result<FlowField> {
    if prev.h != next.h || prev.w != next.w {
        return Err(Error::config(format!(
            "frame sizes disagree: {}x{} vs {}x{}",
            prev.h, prev.w, next.h, next.w
        )));
    }
    if prev.h * prev.w <= 1 {
        return Err(Error::config(
            "flow is undefined on a single-pixel frame",
        ));
    }
    cfg.validate()?;
    let (h, w) = (prev.h, prev.w);
    let d = derivatives(prev, next, cfg);
    let a2 = cfg.alpha * cfg.alpha;

    let mut u = vec![0.0f32; h * w];
    let mut v = vec![0.0f32; h * w];
    let mut u_next = vec![0.0f32; h * w];
    let mut v_next = vec![0.0f32; h * w];

    for _ in 0..cfg.iterations {
        u_next
            .par_chunks_mut(w)
            .zip(v_next.par_chunks_mut(w))
            .enumerate()
            .for_each(|(i, (urow, vrow))| {
                for j in 0..w {
                    let idx = i * w + j;
                    let (su, n1) = neighbor_sums(&u, h, w, i, j);
                    let (sv, _) = neighbor_sums(&v, h, w, i, j);
                    let n = n1 as f32;
                    let ix = d.ix[idx];
                    let iy = d.iy[idx];
                    let it = d.it[idx];
                    let a11 = ix * ix + a2 * n;
                    let a22 = iy * iy + a2 * n;
                    let a12 = ix * iy;
                    let b1 = a2 * su - ix * it;
                    let b2 = a2 * sv - iy * it;
                    let det = a11 * a22 - a12 * a12;
                    urow[j] = (a22 * b1 - a12 * b2) / det;
                    vrow[j] = (a11 * b2 - a12 * b1) / det;
                }
            });
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut v, &mut v_next);
    }
    Ok(FlowField { h, w, u, v })
}

/// Discrete Horn-Schunck objective of a flow field on a frame pair:
/// brightness-constancy residual plus alpha^2 times forward-difference
/// smoothness, using the same derivative stencils as the solver.
pub fn hs_energy(prev: &Image, next: &Image, cfg: &HsConfig, flow: &FlowField) -> f64 {
    let d = derivatives(prev, next, cfg);
    let (h, w) = (prev.h, prev.w);
    let a2 = cfg.alpha as f64 * cfg.alpha as f64;
    let mut data = 0.0f64;
    let mut smooth = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let r = d.ix[idx] as f64 * flow.u[idx] as f64
                + d.iy[idx] as f64 * flow.v[idx] as f64
                + d.it[idx] as f64;
            data += r * r;
            if j + 1 < w {
                let du = (flow.u[idx + 1] - flow.u[idx]) as f64;
                let dv = (flow.v[idx + 1] - flow.v[idx]) as f64;
                smooth += du * du + dv * dv;
            }
            if i + 1 < h {
                let du = (flow.u[idx + w] - flow.u[idx]) as f64;
                let dv = (flow.v[idx + w] - flow.v[idx]) as f64;
                smooth += du * du + dv * dv;
            }
        }
    }
    data + a2 * smooth
}

/// Flow stack for a sampled clip: field i relates frames i and i+1, and the
/// final field duplicates its predecessor so the stack length equals the
/// frame count. Output layout (1, 2, frames, h, w), channel 0 = u, 1 = v.
pub fn clip_to_flowstack(frames: &[Image], cfg: &HsConfig) -> Result<Tensor5<f32>> {
    if frames.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 frames for flow, got {}",
            frames.len()
        )));
    }
    let (h, w) = (frames[0].h, frames[0].w);
    let fields: Vec<FlowField> = (0..frames.len() - 1)
        .into_par_iter()
        .map(|i| horn_schunck(&frames[i], &frames[i + 1], cfg))
        .collect::<Result<_>>()?;

    let d = frames.len();
    let mut out = Tensor5::zeros(Shape5::new(1, 2, d, h, w));
    let plane = h * w;
    for t in 0..d {
        let field = &fields[t.min(d - 2)];
        let data = out.data_mut();
        data[t * plane..(t + 1) * plane].copy_from_slice(&field.u);
        data[(d + t) * plane..(d + t + 1) * plane].copy_from_slice(&field.v);
    }
    Ok(out)
}

/// Displacement clamp applied before feeding flow to the network.
pub const FLOW_CLAMP: f32 = 20.0;

/// Clamps displacements to +-20 px/frame and rescales to [-1, 1].
pub fn normalize_flow(mut stack: Tensor5<f32>) -> Tensor5<f32> {
    for v in stack.data_mut() {
        *v = v.clamp(-FLOW_CLAMP, FLOW_CLAMP) / FLOW_CLAMP;
    }
    stack
}
