//! The two-stream multi-dimensional convolutional network: configuration,
//! layer plan, parameters, forward/backward passes and complexity audits.
//!
//! Every block runs three parallel convolutions (temporal kt x 1 x 1,
//! spatial 1 x ks x ks, spatio-temporal kt x ks x ks), each followed by
//! batch normalization. The branch outputs are channel-concatenated, max
//! pooled, reduced by a 1 x 1 x 1 convolution, joined with a concatenated
//! skip projection and passed through ReLU.

mod audit;
mod backward;
mod forward;
mod params;

pub use audit::{audit_flops, audit_params, ElementOps, FlopAudit, ParamAudit};
pub use backward::{model_backward, BnGrads, MdcBlockGrads, ModelGrads, StreamGrads};
pub use forward::{
    mdc_block_forward, model_forward, predict, stream_forward, MdcBlockCache, ModelCache,
    StreamCache,
};
pub use params::{init_params, MdcBlockParams, ModelParams, StreamParams};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolSpec, Shape5};

pub const RGB_CHANNELS: usize = 3;
pub const FLOW_CHANNELS: usize = 2;
/// Temporal and spatial kernel extents of the block branches.
pub const BLOCK_KT: usize = 3;
pub const BLOCK_KS: usize = 3;

/// Which input streams the model consumes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StreamMode {
    Rgb,
    Flow,
    Fusion,
}

impl StreamMode {
    pub fn uses_rgb(self) -> bool {
        matches!(self, StreamMode::Rgb | StreamMode::Fusion)
    }

    pub fn uses_flow(self) -> bool {
        matches!(self, StreamMode::Flow | StreamMode::Fusion)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamMode::Rgb => "rgb",
            StreamMode::Flow => "flow",
            StreamMode::Fusion => "fusion",
        }
    }
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(StreamMode::Rgb),
            "flow" => Ok(StreamMode::Flow),
            "fusion" => Ok(StreamMode::Fusion),
            other => Err(Error::usage(format!(
                "unknown mode '{other}' (expected rgb, flow or fusion)"
            ))),
        }
    }
}

/// One multi-dimensional convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MdcBlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial stride of the fused max pool and of the skip projection.
    pub spatial_pool_stride: usize,
}

impl MdcBlockConfig {
    pub fn new(c_in: usize, c_out: usize, spatial_pool_stride: usize) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::config(format!(
                "block output channels must be even for the main/skip split, got {c_out}"
            )));
        }
        if !(spatial_pool_stride == 1 || spatial_pool_stride == 2) {
            return Err(Error::config(format!(
                "block spatial stride must be 1 or 2, got {spatial_pool_stride}"
            )));
        }
        Ok(MdcBlockConfig {
            c_in,
            c_out,
            spatial_pool_stride,
        })
    }
}

/// Full network configuration. Defaults reproduce the published
/// architecture: 32 frames at 224x224 with the 8-16-32-64-128 channel
/// ladder and spatial strides 2, 1, 2, 2.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: StreamMode,
    pub frames: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub block_spatial_strides: Vec<usize>,
    pub classes: usize,
    pub skip_enabled: bool,
}

impl ModelConfig {
    pub fn new(mode: StreamMode) -> Self {
        ModelConfig {
            mode,
            frames: 32,
            input_size: 224,
            stem_channels: 8,
            block_channels: vec![16, 32, 64, 128],
            block_spatial_strides: vec![2, 1, 2, 2],
            classes: 2,
            skip_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(Error::config("at least one block is required"));
        }
        if self.block_channels.len() != self.block_spatial_strides.len() {
            return Err(Error::config(
                "block_channels and block_spatial_strides lengths differ",
            ));
        }
        if self.frames == 0 || self.input_size == 0 {
            return Err(Error::config("frames and input_size must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.stem_channels == 0 {
            return Err(Error::config("stem_channels must be >= 1"));
        }
        for (&c, &s) in self
            .block_channels
            .iter()
            .zip(&self.block_spatial_strides)
        {
            MdcBlockConfig::new(0, c, s).map(|_| ())?;
        }
        Ok(())
    }

    /// Channels of the final block, i.e. the per-stream feature width.
    pub fn stream_feature_dim(&self) -> usize {
        *self.block_channels.last().expect("validated non-empty")
    }

    /// Width of the feature vector entering the fc head.
    pub fn feature_dim(&self) -> usize {
        let per_stream = self.stream_feature_dim();
        match self.mode {
            StreamMode::Fusion => 2 * per_stream,
            _ => per_stream,
        }
    }

    pub fn input_shape(&self, stream_channels: usize, batch: usize) -> Shape5 {
        Shape5::new(
            batch,
            stream_channels,
            self.frames,
            self.input_size,
            self.input_size,
        )
    }
}

/// Resolved geometry of one block: conv/pool specs plus input and output
/// shapes at batch 1.
#[derive(Clone, Debug)]
pub struct BlockPlan {
    pub cfg: MdcBlockConfig,
    pub in_shape: Shape5,
    pub out_shape: Shape5,
    pub conv_1d: ConvSpec,
    pub conv_2d: ConvSpec,
    pub conv_3d: ConvSpec,
    pub pool: PoolSpec,
    pub reduce: ConvSpec,
    pub skip: Option<ConvSpec>,
}

/// Resolved geometry of one stream: stem, pool and blocks.
#[derive(Clone, Debug)]
pub struct StreamPlan {
    pub in_channels: usize,
    pub stem: ConvSpec,
    pub stem_out: Shape5,
    pub stem_pool: PoolSpec,
    pub stem_pool_out: Shape5,
    pub blocks: Vec<BlockPlan>,
    /// Feature map entering global average pooling.
    pub feature_map: Shape5,
}

/// Layer plan for the whole network; the single source of truth shared by
/// initialization, the forward pass and the complexity audits.
#[derive(Clone, Debug)]
pub struct ModelPlan {
    pub config: ModelConfig,
    pub rgb: Option<StreamPlan>,
    pub flow: Option<StreamPlan>,
    pub feature_dim: usize,
}

fn plan_block(cfg: MdcBlockConfig, in_shape: Shape5, skip_enabled: bool) -> Result<BlockPlan> {
    let s = cfg.spatial_pool_stride;
    let conv_1d = ConvSpec::new(
        cfg.c_in,
        cfg.c_out,
        (BLOCK_KT, 1, 1),
        (1, 1, 1),
        (BLOCK_KT / 2, 0, 0),
    )?;
    let conv_2d = ConvSpec::new(
        cfg.c_in,
        cfg.c_out,
        (1, BLOCK_KS, BLOCK_KS),
        (1, 1, 1),
        (0, BLOCK_KS / 2, BLOCK_KS / 2),
    )?;
    let conv_3d = ConvSpec::new(
        cfg.c_in,
        cfg.c_out,
        (BLOCK_KT, BLOCK_KS, BLOCK_KS),
        (1, 1, 1),
        (BLOCK_KT / 2, BLOCK_KS / 2, BLOCK_KS / 2),
    )?;
    let pool = PoolSpec::new((1, 3, 3), (1, s, s), (0, 1, 1))?;
    let main_out = if skip_enabled {
        cfg.c_out / 2
    } else {
        cfg.c_out
    };
    let reduce = ConvSpec::new(3 * cfg.c_out, main_out, (1, 1, 1), (1, 1, 1), (0, 0, 0))?;
    let skip = if skip_enabled {
        Some(ConvSpec::new(
            cfg.c_in,
            cfg.c_out / 2,
            (1, 1, 1),
            (1, s, s),
            (0, 0, 0),
        )?)
    } else {
        None
    };

    let branch_out = conv_1d.out_shape(in_shape)?;
    debug_assert_eq!(branch_out, conv_2d.out_shape(in_shape)?);
    debug_assert_eq!(branch_out, conv_3d.out_shape(in_shape)?);
    let fused = Shape5::new(
        branch_out.n,
        3 * cfg.c_out,
        branch_out.d,
        branch_out.h,
        branch_out.w,
    );
    let pooled = pool.out_shape(fused)?;
    let reduced = reduce.out_shape(pooled)?;
    let out_shape = if let Some(skip_spec) = &skip {
        let skip_out = skip_spec.out_shape(in_shape)?;
        if (skip_out.d, skip_out.h, skip_out.w) != (reduced.d, reduced.h, reduced.w) {
            return Err(Error::config(format!(
                "skip projection output {skip_out} does not align with main path {reduced}"
            )));
        }
        Shape5::new(reduced.n, cfg.c_out, reduced.d, reduced.h, reduced.w)
    } else {
        reduced
    };

    Ok(BlockPlan {
        cfg,
        in_shape,
        out_shape,
        conv_1d,
        conv_2d,
        conv_3d,
        pool,
        reduce,
        skip,
    })
}

fn plan_stream(config: &ModelConfig, in_channels: usize) -> Result<StreamPlan> {
    let input = config.input_shape(in_channels, 1);
    let stem = ConvSpec::new(
        in_channels,
        config.stem_channels,
        (5, 7, 7),
        (1, 2, 2),
        (2, 3, 3),
    )?;
    let stem_out = stem.out_shape(input)?;
    let stem_pool = PoolSpec::new((1, 3, 3), (1, 2, 2), (0, 1, 1))?;
    let stem_pool_out = stem_pool.out_shape(stem_out)?;

    let mut blocks = Vec::with_capacity(config.block_channels.len());
    let mut shape = stem_pool_out;
    let mut c_in = config.stem_channels;
    for (&c_out, &stride) in config
        .block_channels
        .iter()
        .zip(&config.block_spatial_strides)
    {
        let cfg = MdcBlockConfig::new(c_in, c_out, stride)?;
        let block = plan_block(cfg, shape, config.skip_enabled)?;
        shape = block.out_shape;
        c_in = c_out;
        blocks.push(block);
    }
    Ok(StreamPlan {
        in_channels,
        stem,
        stem_out,
        stem_pool,
        stem_pool_out,
        blocks,
        feature_map: shape,
    })
}

/// Resolves a configuration into concrete layer geometry.
pub fn plan(config: &ModelConfig) -> Result<ModelPlan> {
    config.validate()?;
    let rgb = if config.mode.uses_rgb() {
        Some(plan_stream(config, RGB_CHANNELS)?)
    } else {
        None
    };
    let flow = if config.mode.uses_flow() {
        Some(plan_stream(config, FLOW_CHANNELS)?)
    } else {
        None
    };
    Ok(ModelPlan {
        feature_dim: config.feature_dim(),
        config: config.clone(),
        rgb,
        flow,
    })
}
