//! Per-channel batch normalization over (batch, frames, rows, columns).
//!
//! State updates are returned functionally; the caller decides when to adopt
//! the new running statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{blocked_sum, Real, Shape5, Tensor5};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Infer,
}

/// Learnable scale/shift plus running statistics for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Real> BnState<T> {
    /// Fresh state: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize, momentum: T, epsilon: T) -> Self {
        BnState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x_channels: usize) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::config("batchnorm state vectors disagree in length"));
        }
        if x_channels != c {
            return Err(Error::config(format!(
                "input has {x_channels} channels, batchnorm state has {c}"
            )));
        }
        if self.epsilon <= T::zero() {
            return Err(Error::config("batchnorm epsilon must be positive"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> BnState<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of_f64(x.as_f64())).collect();
        BnState {
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            momentum: U::of_f64(self.momentum.as_f64()),
            epsilon: U::of_f64(self.epsilon.as_f64()),
        }
    }
}

/// Everything the backward pass needs from a train-mode application.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    shape: Shape5,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

/// Normalizes each channel. Train mode uses batch statistics and returns the
/// state with updated running stats; infer mode uses the running stats and
/// returns the state unchanged.
pub fn batchnorm_apply<T: Real>(
    x: &Tensor5<T>,
    state: &BnState<T>,
    mode: BnMode,
) -> Result<(Tensor5<T>, Option<BnCache<T>>, BnState<T>)> {
    state.check(x.shape.c)?;
    let shape = x.shape;
    let vol = shape.volume();
    let channels = shape.c;
    let per_batch = shape.per_batch();
    let m = shape.n * vol;
    let xd = x.data();

    let channel_stats = |c: usize| -> (T, T) {
        // Two-pass mean/variance with fixed accumulation order.
        let mut total = T::zero();
        for n in 0..shape.n {
            let block = &xd[n * per_batch + c * vol..n * per_batch + (c + 1) * vol];
            total += blocked_sum(block);
        }
        let mean = total / T::of_f64(m as f64);
        let mut sq = T::zero();
        for n in 0..shape.n {
            let block = &xd[n * per_batch + c * vol..n * per_batch + (c + 1) * vol];
            let mut acc = T::zero();
            for &v in block {
                let d = v - mean;
                acc += d * d;
            }
            sq += acc;
        }
        (mean, sq / T::of_f64(m as f64))
    };

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        BnMode::Train => {
            let stats: Vec<(T, T)> = (0..channels)
                .into_par_iter()
                .map(channel_stats)
                .collect();
            stats.into_iter().unzip()
        }
        BnMode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + state.epsilon).sqrt())
        .collect();

    let mut y = Tensor5::zeros(shape);
    let gamma = &state.gamma;
    let beta = &state.beta;
    let mut x_hat = match mode {
        BnMode::Train => vec![T::zero(); xd.len()],
        BnMode::Infer => Vec::new(),
    };

    let normalize = |xs: &[T], ys: &mut [T], hats: Option<&mut [T]>, c: usize| {
        let g = gamma[c];
        let b = beta[c];
        let mu = mean[c];
        let is = inv_std[c];
        match hats {
            Some(hs) => {
                for ((&v, yo), ho) in xs.iter().zip(ys.iter_mut()).zip(hs.iter_mut()) {
                    let h = (v - mu) * is;
                    *ho = h;
                    *yo = g * h + b;
                }
            }
            None => {
                for (&v, yo) in xs.iter().zip(ys.iter_mut()) {
                    *yo = g * ((v - mu) * is) + b;
                }
            }
        }
    };

    match mode {
        BnMode::Train => {
            y.data_mut()
                .par_chunks_mut(vol)
                .zip(x_hat.par_chunks_mut(vol))
                .enumerate()
                .for_each(|(i, (ys, hs))| {
                    let c = i % channels;
                    let base = i * vol;
                    normalize(&xd[base..base + vol], ys, Some(hs), c);
                });
        }
        BnMode::Infer => {
            y.data_mut().par_chunks_mut(vol).enumerate().for_each(|(i, ys)| {
                let c = i % channels;
                let base = i * vol;
                normalize(&xd[base..base + vol], ys, None, c);
            });
        }
    }

    match mode {
        BnMode::Infer => Ok((y, None, state.clone())),
        BnMode::Train => {
            let mut next = state.clone();
            let mom = state.momentum;
            for c in 0..channels {
                next.running_mean[c] = (T::one() - mom) * next.running_mean[c] + mom * mean[c];
                next.running_var[c] = (T::one() - mom) * next.running_var[c] + mom * var[c];
            }
            let cache = BnCache {
                shape,
                x_hat,
                inv_std,
                gamma: gamma.clone(),
            };
            Ok((y, Some(cache), next))
        }
    }
}

/// Gradients through train-mode normalization, including the dependence of
/// the batch statistics on the input.
pub fn batchnorm_backward<T: Real>(
    cache: &BnCache<T>,
    grad_out: &Tensor5<T>,
) -> Result<(Tensor5<T>, Vec<T>, Vec<T>)> {
    if grad_out.shape != cache.shape {
        return Err(Error::config(format!(
            "grad_out shape {} does not match cached shape {}",
            grad_out.shape, cache.shape
        )));
    }
    let shape = cache.shape;
    let vol = shape.volume();
    let per_batch = shape.per_batch();
    let channels = shape.c;
    let m = shape.n * vol;
    let m_t = T::of_f64(m as f64);
    let go = grad_out.data();

    // Per-channel sums of g and g * x_hat, fixed order.
    let sums: Vec<(T, T)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for n in 0..shape.n {
                let base = n * per_batch + c * vol;
                let gs = &go[base..base + vol];
                let hs = &cache.x_hat[base..base + vol];
                let mut a1 = T::zero();
                let mut a2 = T::zero();
                for (&g, &h) in gs.iter().zip(hs) {
                    a1 += g;
                    a2 += g * h;
                }
                s1 += a1;
                s2 += a2;
            }
            (s1, s2)
        })
        .collect();

    let grad_beta: Vec<T> = sums.iter().map(|&(s1, _)| s1).collect();
    let grad_gamma: Vec<T> = sums.iter().map(|&(_, s2)| s2).collect();

    let mut grad_x = Tensor5::zeros(shape);
    grad_x
        .data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(i, gx)| {
            let c = i % channels;
            let base = i * vol;
            let (s1, s2) = sums[c];
            let scale = cache.gamma[c] * cache.inv_std[c] / m_t;
            let gs = &go[base..base + vol];
            let hs = &cache.x_hat[base..base + vol];
            for ((o, &g), &h) in gx.iter_mut().zip(gs).zip(hs) {
                *o = scale * (m_t * g - s1 - h * s2);
            }
        });

    Ok((grad_x, grad_gamma, grad_beta))
}
