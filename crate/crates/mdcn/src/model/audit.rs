//! Complexity audits: exact parameter and multiply-add counts derived in
//! closed form from the layer plan.
//!
//! One MAC is one floating-point multiply-add. Convolutions contribute
//! (output elements) x (input channels x kernel volume); the fc head
//! contributes classes x features per clip. Batch norm, pooling and ReLU are
//! not multiply-adds and are reported separately as element operations.

use super::{plan, BlockPlan, ModelConfig, ModelPlan, StreamPlan};
use crate::error::Result;
use crate::tensor::{ConvSpec, Shape5};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub total: u64,
    /// (layer name, learnable element count), in forward order.
    pub per_layer: Vec<(String, u64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ElementOps {
    pub batchnorm: u64,
    pub relu: u64,
    pub pool_outputs: u64,
    pub global_avg_pool: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopAudit {
    /// Multiply-adds in convolutions, per clip (batch 1).
    pub conv_macs: u64,
    /// Multiply-adds in the fc head, per clip.
    pub fc_macs: u64,
    /// conv_macs + fc_macs.
    pub total_macs: u64,
    pub per_layer: Vec<(String, u64)>,
    pub element_ops: ElementOps,
}

impl FlopAudit {
    pub fn gflops(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

fn conv_params(spec: &ConvSpec) -> u64 {
    spec.weight_shape().len() as u64
}

fn bn_params(channels: usize) -> u64 {
    2 * channels as u64
}

fn conv_macs(spec: &ConvSpec, out: Shape5) -> u64 {
    out.len() as u64 * spec.field_len() as u64
}

fn stream_params(prefix: &str, sp: &StreamPlan, out: &mut Vec<(String, u64)>) {
    out.push((format!("{prefix}.stem.w"), conv_params(&sp.stem)));
    out.push((format!("{prefix}.stem.bn"), bn_params(sp.stem.out_channels)));
    for (i, b) in sp.blocks.iter().enumerate() {
        let c = b.cfg.c_out;
        out.push((format!("{prefix}.block{i}.w_1d"), conv_params(&b.conv_1d)));
        out.push((format!("{prefix}.block{i}.bn_1d"), bn_params(c)));
        out.push((format!("{prefix}.block{i}.w_2d"), conv_params(&b.conv_2d)));
        out.push((format!("{prefix}.block{i}.bn_2d"), bn_params(c)));
        out.push((format!("{prefix}.block{i}.w_3d"), conv_params(&b.conv_3d)));
        out.push((format!("{prefix}.block{i}.bn_3d"), bn_params(c)));
        out.push((format!("{prefix}.block{i}.w_reduce"), conv_params(&b.reduce)));
        if let Some(skip) = &b.skip {
            out.push((format!("{prefix}.block{i}.w_skip"), conv_params(skip)));
        }
    }
}

/// Exact learnable-parameter count with a per-layer breakdown. Counts
/// weights and batch-norm affine terms; running statistics are not
/// learnable and are excluded.
pub fn audit_params(config: &ModelConfig) -> Result<ParamAudit> {
    let p = plan(config)?;
    Ok(audit_params_planned(&p))
}

pub(crate) fn audit_params_planned(p: &ModelPlan) -> ParamAudit {
    let mut per_layer = Vec::new();
    if let Some(sp) = &p.rgb {
        stream_params("rgb", sp, &mut per_layer);
    }
    if let Some(sp) = &p.flow {
        stream_params("flow", sp, &mut per_layer);
    }
    per_layer.push((
        "head.w".into(),
        (p.config.classes * p.feature_dim) as u64,
    ));
    per_layer.push(("head.b".into(), p.config.classes as u64));
    ParamAudit {
        total: per_layer.iter().map(|(_, n)| n).sum(),
        per_layer,
    }
}

fn block_out_elems(b: &BlockPlan, spec: &ConvSpec, input: Shape5) -> u64 {
    let out = spec
        .out_shape(input)
        .expect("plan shapes are consistent");
    let _ = b;
    out.len() as u64
}

fn stream_flops(
    prefix: &str,
    sp: &StreamPlan,
    input: Shape5,
    per_layer: &mut Vec<(String, u64)>,
    ops: &mut ElementOps,
) -> u64 {
    let mut total = 0u64;
    let stem_macs = conv_macs(&sp.stem, sp.stem_out);
    per_layer.push((format!("{prefix}.stem.w"), stem_macs));
    total += stem_macs;
    ops.batchnorm += sp.stem_out.len() as u64;
    ops.relu += sp.stem_out.len() as u64;
    ops.pool_outputs += sp.stem_pool_out.len() as u64;
    let _ = input;

    for (i, b) in sp.blocks.iter().enumerate() {
        let branch_out = b
            .conv_1d
            .out_shape(b.in_shape)
            .expect("plan shapes are consistent");
        for (name, spec) in [
            ("w_1d", &b.conv_1d),
            ("w_2d", &b.conv_2d),
            ("w_3d", &b.conv_3d),
        ] {
            let macs = conv_macs(spec, branch_out);
            per_layer.push((format!("{prefix}.block{i}.{name}"), macs));
            total += macs;
            ops.batchnorm += block_out_elems(b, spec, b.in_shape);
        }
        let fused = Shape5::new(1, 3 * b.cfg.c_out, branch_out.d, branch_out.h, branch_out.w);
        let pooled = b.pool.out_shape(fused).expect("plan shapes are consistent");
        ops.pool_outputs += pooled.len() as u64;
        let reduced = b.reduce.out_shape(pooled).expect("plan shapes are consistent");
        let macs = conv_macs(&b.reduce, reduced);
        per_layer.push((format!("{prefix}.block{i}.w_reduce"), macs));
        total += macs;
        if let Some(skip) = &b.skip {
            let skip_out = skip.out_shape(b.in_shape).expect("plan shapes are consistent");
            let macs = conv_macs(skip, skip_out);
            per_layer.push((format!("{prefix}.block{i}.w_skip"), macs));
            total += macs;
        }
        ops.relu += b.out_shape.len() as u64;
    }
    ops.global_avg_pool += sp.feature_map.len() as u64;
    total
}

/// Exact multiply-add count per clip (batch 1), with a per-layer breakdown
/// and non-MAC element operations reported separately.
pub fn audit_flops(config: &ModelConfig) -> Result<FlopAudit> {
    let p = plan(config)?;
    let mut per_layer = Vec::new();
    let mut ops = ElementOps::default();
    let mut conv_total = 0u64;
    if let Some(sp) = &p.rgb {
        conv_total += stream_flops(
            "rgb",
            sp,
            p.config.input_shape(super::RGB_CHANNELS, 1),
            &mut per_layer,
            &mut ops,
        );
    }
    if let Some(sp) = &p.flow {
        conv_total += stream_flops(
            "flow",
            sp,
            p.config.input_shape(super::FLOW_CHANNELS, 1),
            &mut per_layer,
            &mut ops,
        );
    }
    let fc_macs = (p.config.classes * p.feature_dim) as u64;
    per_layer.push(("head.w".into(), fc_macs));
    Ok(FlopAudit {
        conv_macs: conv_total,
        fc_macs,
        total_macs: conv_total + fc_macs,
        per_layer,
        element_ops: ops,
    })
}
