//! Backward pass producing a gradient tree that mirrors the parameter tree.

use super::forward::{split_cols, MdcBlockCache, ModelCache, StreamCache};
use super::params::{MdcBlockParams, ModelParams, StreamParams, TensorEntry};
use super::{BlockPlan, ModelPlan, StreamPlan};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, conv3d_grad_input, conv3d_grad_weights, global_avg_pool_backward,
    linear_backward, maxpool3d_backward, relu_backward, split_channels,
};
use crate::tensor::{Mat, Real, Tensor5};

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdcBlockGrads<T> {
    pub w_1d: Tensor5<T>,
    pub bn_1d: BnGrads<T>,
    pub w_2d: Tensor5<T>,
    pub bn_2d: BnGrads<T>,
    pub w_3d: Tensor5<T>,
    pub bn_3d: BnGrads<T>,
    pub w_reduce: Tensor5<T>,
    pub w_skip: Option<Tensor5<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamGrads<T> {
    pub stem_w: Tensor5<T>,
    pub stem_bn: BnGrads<T>,
    pub blocks: Vec<MdcBlockGrads<T>>,
}

/// Gradient tree with exactly the layout of `ModelParams`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T> {
    pub rgb: Option<StreamGrads<T>>,
    pub flow: Option<StreamGrads<T>>,
    pub head_w: Mat<T>,
    pub head_b: Vec<T>,
}

impl<T: Real> ModelGrads<T> {
    /// Visits every gradient tensor in the canonical parameter order.
    pub fn visit(&self, f: &mut impl FnMut(TensorEntry<'_, T>)) {
        let streams = [
            self.rgb.as_ref().map(|s| ("rgb", s)),
            self.flow.as_ref().map(|s| ("flow", s)),
        ];
        let dims5 = |t: &Tensor5<T>| vec![t.shape.n, t.shape.c, t.shape.d, t.shape.h, t.shape.w];
        for (prefix, stream) in streams.into_iter().flatten() {
            let mut emit = |name: String, dims: Vec<usize>, data: &[T]| {
                f(TensorEntry { name, dims, data })
            };
            emit(
                format!("{prefix}.stem.w"),
                dims5(&stream.stem_w),
                stream.stem_w.data(),
            );
            emit(
                format!("{prefix}.stem.bn.gamma"),
                vec![stream.stem_bn.gamma.len()],
                &stream.stem_bn.gamma,
            );
            emit(
                format!("{prefix}.stem.bn.beta"),
                vec![stream.stem_bn.beta.len()],
                &stream.stem_bn.beta,
            );
            for (i, b) in stream.blocks.iter().enumerate() {
                let convs = [("w_1d", &b.w_1d), ("w_2d", &b.w_2d), ("w_3d", &b.w_3d)];
                let bns = [("bn_1d", &b.bn_1d), ("bn_2d", &b.bn_2d), ("bn_3d", &b.bn_3d)];
                for ((wn, w), (bn_name, bn)) in convs.into_iter().zip(bns) {
                    emit(format!("{prefix}.block{i}.{wn}"), dims5(w), w.data());
                    emit(
                        format!("{prefix}.block{i}.{bn_name}.gamma"),
                        vec![bn.gamma.len()],
                        &bn.gamma,
                    );
                    emit(
                        format!("{prefix}.block{i}.{bn_name}.beta"),
                        vec![bn.beta.len()],
                        &bn.beta,
                    );
                }
                emit(
                    format!("{prefix}.block{i}.w_reduce"),
                    dims5(&b.w_reduce),
                    b.w_reduce.data(),
                );
                if let Some(ws) = &b.w_skip {
                    emit(format!("{prefix}.block{i}.w_skip"), dims5(ws), ws.data());
                }
            }
        }
        f(TensorEntry {
            name: "head.w".into(),
            dims: vec![self.head_w.rows, self.head_w.cols],
            data: self.head_w.data(),
        });
        f(TensorEntry {
            name: "head.b".into(),
            dims: vec![self.head_b.len()],
            data: &self.head_b,
        });
    }

    pub fn tensor_count(&self) -> usize {
        let mut count = 0usize;
        self.visit(&mut |_| count += 1);
        count
    }
}

fn add_into<T: Real>(dst: &mut Tensor5<T>, src: &Tensor5<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Backward through one block; returns the gradient with respect to the
/// block input along with the weight gradients.
fn block_backward<T: Real>(
    p: &MdcBlockParams<T>,
    plan: &BlockPlan,
    cache: &MdcBlockCache<T>,
    grad_y: &Tensor5<T>,
) -> Result<(Tensor5<T>, MdcBlockGrads<T>)> {
    let g_pre = relu_backward(&cache.pre_relu, grad_y);

    let (g_reduced, g_skip_parts) = match (&p.w_skip, &plan.skip) {
        (Some(ws), Some(skip_spec)) => {
            let half = plan.cfg.c_out / 2;
            let mut parts = split_channels(&g_pre, &[half, half])?;
            let g_skip_out = parts.pop().expect("two parts");
            let g_reduced = parts.pop().expect("two parts");
            let g_w_skip = conv3d_grad_weights(&cache.x, skip_spec, &g_skip_out)?;
            let g_x_skip = conv3d_grad_input(cache.x.shape, ws, skip_spec, &g_skip_out)?;
            (g_reduced, Some((g_x_skip, g_w_skip)))
        }
        _ => (g_pre, None),
    };

    let g_w_reduce = conv3d_grad_weights(&cache.pooled, &plan.reduce, &g_reduced)?;
    let g_pooled = conv3d_grad_input(cache.pooled.shape, &p.w_reduce, &plan.reduce, &g_reduced)?;
    let g_fused = maxpool3d_backward(cache.fused_shape, &cache.pool_argmax, &g_pooled)?;
    drop(g_pooled);

    let c_out = plan.cfg.c_out;
    let branch_grads = split_channels(&g_fused, &[c_out, c_out, c_out])?;
    drop(g_fused);

    let mut g_x = Tensor5::zeros(cache.x.shape);
    let run_branch = |g_x: &mut Tensor5<T>,
                          g_bn_out: &Tensor5<T>,
                          bn_cache: &crate::nn::BnCache<T>,
                          w: &Tensor5<T>,
                          spec: &crate::tensor::ConvSpec|
     -> Result<(Tensor5<T>, BnGrads<T>)> {
        let (g_conv_out, g_gamma, g_beta) = batchnorm_backward(bn_cache, g_bn_out)?;
        let g_w = conv3d_grad_weights(&cache.x, spec, &g_conv_out)?;
        let g_x_branch = conv3d_grad_input(cache.x.shape, w, spec, &g_conv_out)?;
        add_into(g_x, &g_x_branch);
        Ok((
            g_w,
            BnGrads {
                gamma: g_gamma,
                beta: g_beta,
            },
        ))
    };

    let (g_w_1d, g_bn_1d) =
        run_branch(&mut g_x, &branch_grads[0], &cache.bn_caches[0], &p.w_1d, &plan.conv_1d)?;
    let (g_w_2d, g_bn_2d) =
        run_branch(&mut g_x, &branch_grads[1], &cache.bn_caches[1], &p.w_2d, &plan.conv_2d)?;
    let (g_w_3d, g_bn_3d) =
        run_branch(&mut g_x, &branch_grads[2], &cache.bn_caches[2], &p.w_3d, &plan.conv_3d)?;

    let mut w_skip_grad = None;
    if let Some((g_x_skip, g_w_skip)) = g_skip_parts {
        add_into(&mut g_x, &g_x_skip);
        w_skip_grad = Some(g_w_skip);
    }

    Ok((
        g_x,
        MdcBlockGrads {
            w_1d: g_w_1d,
            bn_1d: g_bn_1d,
            w_2d: g_w_2d,
            bn_2d: g_bn_2d,
            w_3d: g_w_3d,
            bn_3d: g_bn_3d,
            w_reduce: g_w_reduce,
            w_skip: w_skip_grad,
        },
    ))
}

fn stream_backward<T: Real>(
    sp: &StreamParams<T>,
    plan: &StreamPlan,
    cache: &StreamCache<T>,
    grad_features: &Mat<T>,
) -> Result<StreamGrads<T>> {
    let mut grad = global_avg_pool_backward(cache.feature_map_shape, grad_features);

    let mut block_grads: Vec<MdcBlockGrads<T>> = Vec::with_capacity(plan.blocks.len());
    for ((bp, bparams), bcache) in plan
        .blocks
        .iter()
        .zip(&sp.blocks)
        .zip(&cache.block_caches)
        .rev()
    {
        let (g_x, g_block) = block_backward(bparams, bp, bcache, &grad)?;
        block_grads.push(g_block);
        grad = g_x;
    }
    block_grads.reverse();

    // Stem: pool -> relu -> bn -> conv; the input gradient is not needed.
    let g_pool_in = maxpool3d_backward(
        cache.stem_pre_relu.shape,
        &cache.stem_pool_argmax,
        &grad,
    )?;
    let g_bn_out = relu_backward(&cache.stem_pre_relu, &g_pool_in);
    let (g_conv_out, g_gamma, g_beta) = batchnorm_backward(&cache.stem_bn_cache, &g_bn_out)?;
    let g_stem_w = conv3d_grad_weights(&cache.clip, &plan.stem, &g_conv_out)?;

    Ok(StreamGrads {
        stem_w: g_stem_w,
        stem_bn: BnGrads {
            gamma: g_gamma,
            beta: g_beta,
        },
        blocks: block_grads,
    })
}

/// Gradients for every learnable tensor given the upstream logit gradient.
/// Requires the cache of a train-mode forward pass.
pub fn model_backward<T: Real>(
    params: &ModelParams<T>,
    plan: &ModelPlan,
    cache: &ModelCache<T>,
    grad_logits: &Mat<T>,
) -> Result<ModelGrads<T>> {
    if !cache.trained {
        return Err(Error::config(
            "model_backward requires a cache from a train-mode forward pass",
        ));
    }
    let (g_features, g_head_w, g_head_b) =
        linear_backward(&cache.features, &params.head_w, grad_logits)?;
    let mut per_stream = split_cols(&g_features, &cache.stream_widths).into_iter();

    let rgb = match (&cache.rgb, &params.rgb, &plan.rgb) {
        (Some(c), Some(sp), Some(stream_plan)) => {
            let g = per_stream.next().expect("width per active stream");
            Some(stream_backward(sp, stream_plan, c, &g)?)
        }
        _ => None,
    };
    let flow = match (&cache.flow, &params.flow, &plan.flow) {
        (Some(c), Some(sp), Some(stream_plan)) => {
            let g = per_stream.next().expect("width per active stream");
            Some(stream_backward(sp, stream_plan, c, &g)?)
        }
        _ => None,
    };

    Ok(ModelGrads {
        rgb,
        flow,
        head_w: g_head_w,
        head_b: g_head_b,
    })
}
