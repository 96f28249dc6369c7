//! Learnable parameters, their initialization, and the canonical named
//! traversal used by the optimizer, checkpoints and audits.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{plan, BlockPlan, ModelConfig, ModelPlan, StreamPlan};
use crate::error::{Error, Result};
use crate::nn::BnState;
use crate::tensor::{Mat, Real, Tensor5};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Weights of one MDC block. `w_skip` is only materialized when the skip
/// connection is enabled; the parameter audit reflects that.
#[derive(Clone, Debug, PartialEq)]
pub struct MdcBlockParams<T> {
    pub w_1d: Tensor5<T>,
    pub bn_1d: BnState<T>,
    pub w_2d: Tensor5<T>,
    pub bn_2d: BnState<T>,
    pub w_3d: Tensor5<T>,
    pub bn_3d: BnState<T>,
    pub w_reduce: Tensor5<T>,
    pub w_skip: Option<Tensor5<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams<T> {
    pub stem_w: Tensor5<T>,
    pub stem_bn: BnState<T>,
    pub blocks: Vec<MdcBlockParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub rgb: Option<StreamParams<T>>,
    pub flow: Option<StreamParams<T>>,
    pub head_w: Mat<T>,
    pub head_b: Vec<T>,
}

/// Zero-mean normal with variance 2/fan_in.
fn he_normal<T: Real, R: Rng>(rng: &mut R, fan_in: usize, count: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..count).map(|_| T::of_f64(dist.sample(rng))).collect()
}

fn init_block<T: Real, R: Rng>(plan: &BlockPlan, rng: &mut R) -> MdcBlockParams<T> {
    let conv = |spec: &crate::tensor::ConvSpec, rng: &mut R| {
        let shape = spec.weight_shape();
        Tensor5::new(shape, he_normal(rng, spec.field_len(), shape.len()))
            .expect("shape matches draw count")
    };
    let bn = || BnState::new(plan.cfg.c_out, T::of_f64(BN_MOMENTUM), T::of_f64(BN_EPSILON));
    MdcBlockParams {
        w_1d: conv(&plan.conv_1d, rng),
        bn_1d: bn(),
        w_2d: conv(&plan.conv_2d, rng),
        bn_2d: bn(),
        w_3d: conv(&plan.conv_3d, rng),
        bn_3d: bn(),
        w_reduce: conv(&plan.reduce, rng),
        w_skip: plan.skip.as_ref().map(|s| conv(s, rng)),
    }
}

fn init_stream<T: Real, R: Rng>(plan: &StreamPlan, rng: &mut R) -> StreamParams<T> {
    let shape = plan.stem.weight_shape();
    let stem_w = Tensor5::new(shape, he_normal(rng, plan.stem.field_len(), shape.len()))
        .expect("shape matches draw count");
    StreamParams {
        stem_w,
        stem_bn: BnState::new(
            plan.stem.out_channels,
            T::of_f64(BN_MOMENTUM),
            T::of_f64(BN_EPSILON),
        ),
        blocks: plan.blocks.iter().map(|b| init_block(b, rng)).collect(),
    }
}

/// Draws a fresh parameter tree, fully determined by the seed.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let model_plan = plan(config)?;
    Ok(init_from_plan(&model_plan, seed))
}

pub(crate) fn init_from_plan<T: Real>(model_plan: &ModelPlan, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = model_plan.rgb.as_ref().map(|s| init_stream(s, &mut rng));
    let flow = model_plan.flow.as_ref().map(|s| init_stream(s, &mut rng));
    let feat = model_plan.feature_dim;
    let classes = model_plan.config.classes;
    let head_w = Mat::new(classes, feat, he_normal(&mut rng, feat, classes * feat))
        .expect("shape matches draw count");
    ModelParams {
        rgb,
        flow,
        head_w,
        head_b: vec![T::zero(); classes],
    }
}

/// A named view of one learnable tensor or one running-statistics buffer.
pub struct TensorEntry<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

fn tensor_dims(t: &crate::tensor::Shape5) -> Vec<usize> {
    vec![t.n, t.c, t.d, t.h, t.w]
}

impl<T: Real> ModelParams<T> {
    fn stream_names(&self) -> [Option<(&'static str, &StreamParams<T>)>; 2] {
        [
            self.rgb.as_ref().map(|s| ("rgb", s)),
            self.flow.as_ref().map(|s| ("flow", s)),
        ]
    }

    /// Visits every learnable tensor in the canonical order:
    /// rgb stream, flow stream, head; within a stream: stem then blocks.
    pub fn visit(&self, f: &mut impl FnMut(TensorEntry<'_, T>)) {
        fn entry<T>(name: String, dims: Vec<usize>, data: &[T]) -> TensorEntry<'_, T> {
            TensorEntry { name, dims, data }
        }
        for (prefix, stream) in self.stream_names().into_iter().flatten() {
            f(entry(
                format!("{prefix}.stem.w"),
                tensor_dims(&stream.stem_w.shape),
                stream.stem_w.data(),
            ));
            f(entry(
                format!("{prefix}.stem.bn.gamma"),
                vec![stream.stem_bn.gamma.len()],
                &stream.stem_bn.gamma,
            ));
            f(entry(
                format!("{prefix}.stem.bn.beta"),
                vec![stream.stem_bn.beta.len()],
                &stream.stem_bn.beta,
            ));
            for (i, b) in stream.blocks.iter().enumerate() {
                let convs = [("w_1d", &b.w_1d), ("w_2d", &b.w_2d), ("w_3d", &b.w_3d)];
                let bns = [("bn_1d", &b.bn_1d), ("bn_2d", &b.bn_2d), ("bn_3d", &b.bn_3d)];
                for ((wn, w), (bn_name, bn)) in convs.into_iter().zip(bns) {
                    f(entry(
                        format!("{prefix}.block{i}.{wn}"),
                        tensor_dims(&w.shape),
                        w.data(),
                    ));
                    f(entry(
                        format!("{prefix}.block{i}.{bn_name}.gamma"),
                        vec![bn.gamma.len()],
                        &bn.gamma,
                    ));
                    f(entry(
                        format!("{prefix}.block{i}.{bn_name}.beta"),
                        vec![bn.beta.len()],
                        &bn.beta,
                    ));
                }
                f(entry(
                    format!("{prefix}.block{i}.w_reduce"),
                    tensor_dims(&b.w_reduce.shape),
                    b.w_reduce.data(),
                ));
                if let Some(ws) = &b.w_skip {
                    f(entry(
                        format!("{prefix}.block{i}.w_skip"),
                        tensor_dims(&ws.shape),
                        ws.data(),
                    ));
                }
            }
        }
        f(entry(
            "head.w".into(),
            vec![self.head_w.rows, self.head_w.cols],
            self.head_w.data(),
        ));
        f(entry("head.b".into(), vec![self.head_b.len()], &self.head_b));
    }

    /// Visits every learnable tensor mutably, in the same order as `visit`.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [T])) {
        let streams = [
            self.rgb.as_mut().map(|s| ("rgb", s)),
            self.flow.as_mut().map(|s| ("flow", s)),
        ];
        for (prefix, stream) in streams.into_iter().flatten() {
            f(&format!("{prefix}.stem.w"), stream.stem_w.data_mut());
            f(&format!("{prefix}.stem.bn.gamma"), &mut stream.stem_bn.gamma);
            f(&format!("{prefix}.stem.bn.beta"), &mut stream.stem_bn.beta);
            for (i, b) in stream.blocks.iter_mut().enumerate() {
                f(&format!("{prefix}.block{i}.w_1d"), b.w_1d.data_mut());
                f(&format!("{prefix}.block{i}.bn_1d.gamma"), &mut b.bn_1d.gamma);
                f(&format!("{prefix}.block{i}.bn_1d.beta"), &mut b.bn_1d.beta);
                f(&format!("{prefix}.block{i}.w_2d"), b.w_2d.data_mut());
                f(&format!("{prefix}.block{i}.bn_2d.gamma"), &mut b.bn_2d.gamma);
                f(&format!("{prefix}.block{i}.bn_2d.beta"), &mut b.bn_2d.beta);
                f(&format!("{prefix}.block{i}.w_3d"), b.w_3d.data_mut());
                f(&format!("{prefix}.block{i}.bn_3d.gamma"), &mut b.bn_3d.gamma);
                f(&format!("{prefix}.block{i}.bn_3d.beta"), &mut b.bn_3d.beta);
                f(&format!("{prefix}.block{i}.w_reduce"), b.w_reduce.data_mut());
                if let Some(ws) = &mut b.w_skip {
                    f(&format!("{prefix}.block{i}.w_skip"), ws.data_mut());
                }
            }
        }
        f("head.w", self.head_w.data_mut());
        f("head.b", &mut self.head_b);
    }

    /// Visits the batch-norm running statistics (not learnable).
    pub fn visit_buffers(&self, f: &mut impl FnMut(TensorEntry<'_, T>)) {
        for (prefix, stream) in self.stream_names().into_iter().flatten() {
            let mut emit = |name: String, data: &[T]| {
                f(TensorEntry {
                    name,
                    dims: vec![data.len()],
                    data,
                })
            };
            emit(
                format!("{prefix}.stem.bn.running_mean"),
                &stream.stem_bn.running_mean,
            );
            emit(
                format!("{prefix}.stem.bn.running_var"),
                &stream.stem_bn.running_var,
            );
            for (i, b) in stream.blocks.iter().enumerate() {
                for (bn_name, bn) in [("bn_1d", &b.bn_1d), ("bn_2d", &b.bn_2d), ("bn_3d", &b.bn_3d)]
                {
                    emit(format!("{prefix}.block{i}.{bn_name}.running_mean"), &bn.running_mean);
                    emit(format!("{prefix}.block{i}.{bn_name}.running_var"), &bn.running_var);
                }
            }
        }
    }

    /// Mutable access to a running-statistics buffer by name.
    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        let mut parts = name.split('.');
        let stream = match parts.next()? {
            "rgb" => self.rgb.as_mut()?,
            "flow" => self.flow.as_mut()?,
            _ => return None,
        };
        let scope = parts.next()?;
        let bn: &mut BnState<T> = if scope == "stem" {
            if parts.next()? != "bn" {
                return None;
            }
            &mut stream.stem_bn
        } else {
            let idx: usize = scope.strip_prefix("block")?.parse().ok()?;
            let block = stream.blocks.get_mut(idx)?;
            match parts.next()? {
                "bn_1d" => &mut block.bn_1d,
                "bn_2d" => &mut block.bn_2d,
                "bn_3d" => &mut block.bn_3d,
                _ => return None,
            }
        };
        match parts.next()? {
            "running_mean" => Some(&mut bn.running_mean),
            "running_var" => Some(&mut bn.running_var),
            _ => None,
        }
    }

    /// Total learnable element count.
    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit(&mut |e| total += e.data.len() as u64);
        total
    }

    /// Number of learnable tensors in the tree.
    pub fn tensor_count(&self) -> usize {
        let mut count = 0usize;
        self.visit(&mut |_| count += 1);
        count
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cast_stream = |s: &StreamParams<T>| StreamParams {
            stem_w: s.stem_w.cast(),
            stem_bn: s.stem_bn.cast(),
            blocks: s
                .blocks
                .iter()
                .map(|b| MdcBlockParams {
                    w_1d: b.w_1d.cast(),
                    bn_1d: b.bn_1d.cast(),
                    w_2d: b.w_2d.cast(),
                    bn_2d: b.bn_2d.cast(),
                    w_3d: b.w_3d.cast(),
                    bn_3d: b.bn_3d.cast(),
                    w_reduce: b.w_reduce.cast(),
                    w_skip: b.w_skip.as_ref().map(|w| w.cast()),
                })
                .collect(),
        };
        ModelParams {
            rgb: self.rgb.as_ref().map(&cast_stream),
            flow: self.flow.as_ref().map(&cast_stream),
            head_w: self.head_w.cast(),
            head_b: self.head_b.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn stream(&self, prefix: &str) -> Result<&StreamParams<T>> {
        match prefix {
            "rgb" => self.rgb.as_ref(),
            "flow" => self.flow.as_ref(),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("model has no {prefix} stream")))
    }
}
