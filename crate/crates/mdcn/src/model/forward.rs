//! Forward passes for blocks, streams and the whole model, with caches for
//! the backward pass. Train-mode batch-norm updates are carried in the cache
//! and adopted by the caller via `ModelCache::apply_bn_updates`.

use super::params::{MdcBlockParams, ModelParams, StreamParams};
use super::{BlockPlan, ModelPlan, StreamPlan};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_apply, concat_channels, conv3d_forward, global_avg_pool, linear_forward,
    maxpool3d_apply, relu_forward, BnCache, BnMode, BnState,
};
use crate::tensor::{Mat, Real, Shape5, Tensor5};

pub struct MdcBlockCache<T> {
    pub(crate) x: Tensor5<T>,
    pub(crate) bn_caches: [BnCache<T>; 3],
    pub bn_next: [BnState<T>; 3],
    pub(crate) fused_shape: Shape5,
    pub(crate) pool_argmax: Vec<usize>,
    pub(crate) pooled: Tensor5<T>,
    pub(crate) pre_relu: Tensor5<T>,
}

/// One block: three branch convolutions with batch norm, channel fusion,
/// max pool, 1x1x1 reduction, optional concatenated skip projection, ReLU.
pub fn mdc_block_forward<T: Real>(
    x: &Tensor5<T>,
    p: &MdcBlockParams<T>,
    plan: &BlockPlan,
    mode: BnMode,
) -> Result<(Tensor5<T>, Option<MdcBlockCache<T>>)> {
    if x.shape.c != plan.cfg.c_in {
        return Err(Error::config(format!(
            "block expects {} input channels, got {}",
            plan.cfg.c_in, x.shape.c
        )));
    }
    if p.w_skip.is_some() != plan.skip.is_some() {
        return Err(Error::config(
            "skip setting of parameters and plan disagree",
        ));
    }

    let run_branch = |w, spec, bn: &BnState<T>| -> Result<_> {
        let pre = conv3d_forward(x, w, spec)?;
        batchnorm_apply(&pre, bn, mode)
    };
    let (b1, c1, n1) = run_branch(&p.w_1d, &plan.conv_1d, &p.bn_1d)?;
    let (b2, c2, n2) = run_branch(&p.w_2d, &plan.conv_2d, &p.bn_2d)?;
    let (b3, c3, n3) = run_branch(&p.w_3d, &plan.conv_3d, &p.bn_3d)?;

    let fused = concat_channels(&[&b1, &b2, &b3])?;
    drop((b1, b2, b3));
    let fused_shape = fused.shape;
    let (pooled, argmax) = maxpool3d_apply(&fused, &plan.pool)?;
    drop(fused);
    let reduced = conv3d_forward(&pooled, &p.w_reduce, &plan.reduce)?;

    let pre_relu = match (&p.w_skip, &plan.skip) {
        (Some(ws), Some(skip_spec)) => {
            let skip_out = conv3d_forward(x, ws, skip_spec)?;
            concat_channels(&[&reduced, &skip_out])?
        }
        _ => reduced,
    };
    let y = relu_forward(&pre_relu);

    let cache = match mode {
        BnMode::Infer => None,
        BnMode::Train => Some(MdcBlockCache {
            x: x.clone(),
            bn_caches: [
                c1.expect("train mode yields cache"),
                c2.expect("train mode yields cache"),
                c3.expect("train mode yields cache"),
            ],
            bn_next: [n1, n2, n3],
            fused_shape,
            pool_argmax: argmax,
            pooled,
            pre_relu,
        }),
    };
    Ok((y, cache))
}

pub struct StreamCache<T> {
    pub(crate) clip: Tensor5<T>,
    pub(crate) stem_bn_cache: BnCache<T>,
    pub stem_bn_next: BnState<T>,
    pub(crate) stem_pre_relu: Tensor5<T>,
    pub(crate) stem_pool_argmax: Vec<usize>,
    pub(crate) block_caches: Vec<MdcBlockCache<T>>,
    pub(crate) feature_map_shape: Shape5,
}

/// Stem conv + BN + ReLU + max pool, the block stack, then global average
/// pooling to an (n, channels) feature matrix. Also reports the activation
/// shape after the stem conv, the stem pool and every block.
pub fn stream_forward<T: Real>(
    clip: &Tensor5<T>,
    sp: &StreamParams<T>,
    plan: &StreamPlan,
    mode: BnMode,
) -> Result<(Mat<T>, Vec<Shape5>, Option<StreamCache<T>>)> {
    if clip.shape.c != plan.in_channels {
        return Err(Error::config(format!(
            "stream expects {} input channels, got {}",
            plan.in_channels, clip.shape.c
        )));
    }
    let mut stages = Vec::with_capacity(2 + plan.blocks.len());

    let stem_out = conv3d_forward(clip, &sp.stem_w, &plan.stem)?;
    stages.push(stem_out.shape);
    let (stem_bn_out, stem_bn_cache, stem_bn_next) = batchnorm_apply(&stem_out, &sp.stem_bn, mode)?;
    drop(stem_out);
    let stem_relu = relu_forward(&stem_bn_out);
    let (pooled, stem_pool_argmax) = maxpool3d_apply(&stem_relu, &plan.stem_pool)?;
    drop(stem_relu);
    stages.push(pooled.shape);

    let want_cache = matches!(mode, BnMode::Train);
    let mut block_caches = Vec::new();
    let mut x = pooled;
    for (bp, bparams) in plan.blocks.iter().zip(&sp.blocks) {
        let (y, cache) = mdc_block_forward(&x, bparams, bp, mode)?;
        stages.push(y.shape);
        if let Some(c) = cache {
            block_caches.push(c);
        }
        x = y;
    }
    let feature_map_shape = x.shape;
    let features = global_avg_pool(&x);

    let cache = if want_cache {
        Some(StreamCache {
            clip: clip.clone(),
            stem_bn_cache: stem_bn_cache.expect("train mode yields cache"),
            stem_bn_next,
            stem_pre_relu: stem_bn_out,
            stem_pool_argmax,
            block_caches,
            feature_map_shape,
        })
    } else {
        None
    };
    Ok((features, stages, cache))
}

pub struct ModelCache<T> {
    /// Activation shapes per stream: stem conv, stem pool, then each block.
    pub rgb_stages: Option<Vec<Shape5>>,
    pub flow_stages: Option<Vec<Shape5>>,
    pub(crate) rgb: Option<StreamCache<T>>,
    pub(crate) flow: Option<StreamCache<T>>,
    pub(crate) features: Mat<T>,
    pub(crate) stream_widths: Vec<usize>,
    pub(crate) trained: bool,
}

impl<T: Real> ModelCache<T> {
    /// Adopts the running-statistics updates of a train-mode forward pass.
    pub fn apply_bn_updates(&self, params: &mut ModelParams<T>) {
        let apply_stream = |cache: &StreamCache<T>, sp: &mut StreamParams<T>| {
            sp.stem_bn = cache.stem_bn_next.clone();
            for (bc, bp) in cache.block_caches.iter().zip(&mut sp.blocks) {
                bp.bn_1d = bc.bn_next[0].clone();
                bp.bn_2d = bc.bn_next[1].clone();
                bp.bn_3d = bc.bn_next[2].clone();
            }
        };
        if let (Some(c), Some(sp)) = (&self.rgb, params.rgb.as_mut()) {
            apply_stream(c, sp);
        }
        if let (Some(c), Some(sp)) = (&self.flow, params.flow.as_mut()) {
            apply_stream(c, sp);
        }
    }
}

/// Full network pass. Streams must be present exactly as the configuration
/// demands. Logits are raw; softmax is applied only at prediction time.
pub fn model_forward<T: Real>(
    rgb: Option<&Tensor5<T>>,
    flow: Option<&Tensor5<T>>,
    params: &ModelParams<T>,
    plan: &ModelPlan,
    mode: BnMode,
) -> Result<(Mat<T>, ModelCache<T>)> {
    let mode_cfg = plan.config.mode;
    if mode_cfg.uses_rgb() != rgb.is_some() || mode_cfg.uses_flow() != flow.is_some() {
        return Err(Error::usage(format!(
            "mode {} requires rgb={} flow={}, got rgb={} flow={}",
            mode_cfg.as_str(),
            mode_cfg.uses_rgb(),
            mode_cfg.uses_flow(),
            rgb.is_some(),
            flow.is_some()
        )));
    }

    let mut feats: Vec<Mat<T>> = Vec::new();
    let mut widths = Vec::new();
    let mut rgb_stages = None;
    let mut flow_stages = None;
    let mut rgb_cache = None;
    let mut flow_cache = None;

    if let (Some(clip), Some(sp), Some(stream_plan)) = (rgb, &params.rgb, &plan.rgb) {
        let (f, stages, cache) = stream_forward(clip, sp, stream_plan, mode)?;
        widths.push(f.cols);
        feats.push(f);
        rgb_stages = Some(stages);
        rgb_cache = cache;
    }
    if let (Some(clip), Some(sp), Some(stream_plan)) = (flow, &params.flow, &plan.flow) {
        let (f, stages, cache) = stream_forward(clip, sp, stream_plan, mode)?;
        widths.push(f.cols);
        feats.push(f);
        flow_stages = Some(stages);
        flow_cache = cache;
    }
    if feats.is_empty() {
        return Err(Error::config("model has no active stream parameters"));
    }

    let features = hcat(&feats)?;
    if features.cols != plan.feature_dim {
        return Err(Error::config(format!(
            "pooled features have width {}, head expects {}",
            features.cols, plan.feature_dim
        )));
    }
    let logits = linear_forward(&features, &params.head_w, &params.head_b)?;

    let cache = ModelCache {
        rgb_stages,
        flow_stages,
        rgb: rgb_cache,
        flow: flow_cache,
        features,
        stream_widths: widths,
        trained: matches!(mode, BnMode::Train),
    };
    Ok((logits, cache))
}

/// Argmax class per row; ties resolve to the lowest class index.
pub fn predict<T: Real>(logits: &Mat<T>) -> Vec<usize> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn hcat<T: Real>(mats: &[Mat<T>]) -> Result<Mat<T>> {
    let rows = mats[0].rows;
    if mats.iter().any(|m| m.rows != rows) {
        return Err(Error::config("feature matrices disagree in batch size"));
    }
    let cols: usize = mats.iter().map(|m| m.cols).sum();
    let mut out = Mat::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0usize;
        for m in mats {
            let dst = &mut out.data_mut()[r * cols + off..r * cols + off + m.cols];
            dst.copy_from_slice(m.row(r));
            off += m.cols;
        }
    }
    Ok(out)
}

pub(crate) fn split_cols<T: Real>(m: &Mat<T>, widths: &[usize]) -> Vec<Mat<T>> {
    let mut parts: Vec<Mat<T>> = widths.iter().map(|&w| Mat::zeros(m.rows, w)).collect();
    for r in 0..m.rows {
        let mut off = 0usize;
        for (part, &w) in parts.iter_mut().zip(widths) {
            let pw = part.cols;
            part.data_mut()[r * pw..r * pw + pw]
                .copy_from_slice(&m.row(r)[off..off + w]);
            off += w;
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;
    use crate::model::{plan, ModelConfig, StreamMode};
    use crate::nn::softmax;

    fn desk_config(mode: StreamMode) -> ModelConfig {
        let mut cfg = ModelConfig::new(mode);
        cfg.frames = 4;
        cfg.input_size = 28;
        cfg.block_channels = vec![4, 4, 6, 8];
        cfg.block_spatial_strides = vec![2, 1, 2, 2];
        cfg
    }

    #[test]
    fn block_shapes_match_architecture_table() {
        let cfg = ModelConfig::new(StreamMode::Rgb);
        let p = plan(&cfg).unwrap();
        let blocks = &p.rgb.as_ref().unwrap().blocks;
        // block 1: 8 -> 16, stride 2: 56 -> 28
        let params: crate::model::ModelParams<f32> = init_params(&cfg, 1).unwrap();
        let stream = params.rgb.as_ref().unwrap();
        let x = Tensor5::from_fn(Shape5::new(1, 8, 2, 56, 56), |i| ((i % 37) as f32 - 18.0) / 19.0);
        let (y, _) = mdc_block_forward(&x, &stream.blocks[0], &blocks[0], BnMode::Infer).unwrap();
        assert_eq!((y.shape.c, y.shape.h, y.shape.w), (16, 28, 28));
        // block 2: 16 -> 32, stride 1: 28 stays 28
        let x2 = Tensor5::from_fn(Shape5::new(1, 16, 2, 28, 28), |i| ((i % 23) as f32 - 11.0) / 7.0);
        let (y2, _) = mdc_block_forward(&x2, &stream.blocks[1], &blocks[1], BnMode::Infer).unwrap();
        assert_eq!((y2.shape.c, y2.shape.h, y2.shape.w), (32, 28, 28));
    }

    #[test]
    fn zero_weights_and_beta_give_zero_output() {
        let cfg = desk_config(StreamMode::Rgb);
        let p = plan(&cfg).unwrap();
        let mut params: crate::model::ModelParams<f32> = init_params(&cfg, 1).unwrap();
        params.visit_mut(&mut |_, data| data.fill(0.0));
        let stream = params.rgb.as_ref().unwrap();
        let bp = &p.rgb.as_ref().unwrap().blocks[0];
        let x = Tensor5::from_fn(bp.in_shape, |i| (i as f32).sin());
        let (y, _) = mdc_block_forward(&x, &stream.blocks[0], bp, BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_forward_yields_batch_by_classes_logits() {
        let cfg = desk_config(StreamMode::Fusion);
        let p = plan(&cfg).unwrap();
        let params: crate::model::ModelParams<f32> = init_params(&cfg, 5).unwrap();
        let rgb = Tensor5::from_fn(cfg.input_shape(3, 4), |i| ((i % 97) as f32 - 48.0) / 50.0);
        let flow = Tensor5::from_fn(cfg.input_shape(2, 4), |i| ((i % 53) as f32 - 26.0) / 30.0);
        let (logits, cache) =
            model_forward(Some(&rgb), Some(&flow), &params, &p, BnMode::Infer).unwrap();
        assert_eq!((logits.rows, logits.cols), (4, 2));
        assert!(cache.rgb_stages.is_some() && cache.flow_stages.is_some());

        let probs = softmax(&logits);
        for r in 0..probs.rows {
            let s: f32 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_head_weights_give_bias_logits() {
        let cfg = desk_config(StreamMode::Rgb);
        let p = plan(&cfg).unwrap();
        let mut params: crate::model::ModelParams<f32> = init_params(&cfg, 5).unwrap();
        params.head_w.data_mut().fill(0.0);
        params.head_b = vec![0.25, -0.75];
        let rgb = Tensor5::from_fn(cfg.input_shape(3, 2), |i| ((i % 11) as f32) / 11.0);
        let (logits, _) = model_forward(Some(&rgb), None, &params, &p, BnMode::Infer).unwrap();
        for r in 0..2 {
            assert_eq!(logits.row(r), &[0.25, -0.75]);
        }
    }

    #[test]
    fn missing_stream_is_usage_error() {
        let cfg = desk_config(StreamMode::Fusion);
        let p = plan(&cfg).unwrap();
        let params: crate::model::ModelParams<f32> = init_params(&cfg, 5).unwrap();
        let rgb = Tensor5::from_fn(cfg.input_shape(3, 1), |i| i as f32);
        assert!(matches!(
            model_forward(Some(&rgb), None, &params, &p, BnMode::Infer),
            Err(crate::error::Error::Usage(_))
        ));
    }

    #[test]
    fn infer_forward_is_pure() {
        let cfg = desk_config(StreamMode::Rgb);
        let p = plan(&cfg).unwrap();
        let params: crate::model::ModelParams<f32> = init_params(&cfg, 5).unwrap();
        let rgb = Tensor5::from_fn(cfg.input_shape(3, 1), |i| ((i % 19) as f32 - 9.0) / 10.0);
        let (a, _) = model_forward(Some(&rgb), None, &params, &p, BnMode::Infer).unwrap();
        let (b, _) = model_forward(Some(&rgb), None, &params, &p, BnMode::Infer).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn hcat_and_split_are_inverse() {
        let a = Mat::new(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Mat::new(2, 3, vec![5.0f32, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let joined = hcat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(joined.row(0), &[1.0, 2.0, 5.0, 6.0, 7.0]);
        let parts = split_cols(&joined, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
