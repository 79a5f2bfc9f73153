//! The shared-weight patch encoder and the count scorer.
//!
//! One [`Encoder`] value embeds anchor, positive and negative patches alike,
//! so the three branches share weights by construction. The embedding head
//! is global average pooling of the backbone's last feature map followed by
//! a linear projection to `embedding_dim`. The count scorer is an affine map
//! from the embedding to a scalar.
//!
//! Presets (layer tables are reproduced in `docs/architectures.md`):
//!
//! * `toy-cnn`: four single-convolution stages (8, 16, 32, 64 channels,
//!   SiLU), stride-2 stem then 2x2 average pooling between stages; total
//!   stride 16.
//! * `resunet101-encoder`: 7x7/2 stem (64 channels, ReLU), 2x2 average
//!   pooling, then residual bottleneck stages of 3, 4, 23 and 3 blocks
//!   (256, 512, 1024, 2048 output channels); total stride 32.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::RgbImage;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, Activation, Backbone, BackboneTrace, Bottleneck, ConvAct,
    FeatureMap, Layer, Linear, ParamAllocator,
};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureId {
    ToyCnn,
    Resunet101Encoder,
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchitectureId::ToyCnn => "toy-cnn",
            ArchitectureId::Resunet101Encoder => "resunet101-encoder",
        })
    }
}

const TOY_CHANNELS: [usize; 4] = [8, 16, 32, 64];
const RESNET101_STAGES: [(usize, usize, usize); 4] = [(3, 64, 256), (4, 128, 512), (23, 256, 1024), (3, 512, 2048)];

impl ArchitectureId {
    pub fn build_backbone(self) -> Backbone {
        let mut alloc = ParamAllocator::default();
        let (stages, taps, strides) = match self {
            ArchitectureId::ToyCnn => {
                let act = Some(Activation::Silu);
                let mut stages = vec![vec![Layer::Conv(ConvAct::new(&mut alloc, 3, TOY_CHANNELS[0], 3, 2, act))]];
                for w in TOY_CHANNELS.windows(2) {
                    stages.push(vec![Layer::Pool, Layer::Conv(ConvAct::new(&mut alloc, w[0], w[1], 3, 1, act))]);
                }
                (stages, TOY_CHANNELS.to_vec(), vec![2, 4, 8, 16])
            }
            ArchitectureId::Resunet101Encoder => {
                let act = Activation::Relu;
                let mut stages = vec![vec![Layer::Conv(ConvAct::new(&mut alloc, 3, 64, 7, 2, Some(act)))]];
                let mut taps = vec![64];
                let mut in_ch = 64;
                for (i, &(blocks, mid, out)) in RESNET101_STAGES.iter().enumerate() {
                    let mut stage = Vec::with_capacity(blocks + 1);
                    let stride = if i == 0 {
                        stage.push(Layer::Pool);
                        1
                    } else {
                        2
                    };
                    for b in 0..blocks {
                        let s = if b == 0 { stride } else { 1 };
                        stage.push(Layer::Bottleneck(Bottleneck::new(&mut alloc, in_ch, mid, out, s, act)));
                        in_ch = out;
                    }
                    stages.push(stage);
                    taps.push(out);
                }
                (stages, taps, vec![2, 4, 8, 16, 32])
            }
        };
        Backbone::new(stages, taps, strides, alloc.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub architecture_id: ArchitectureId,
    pub input_size: usize,
    pub embedding_dim: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            architecture_id: ArchitectureId::ToyCnn,
            input_size: 768,
            embedding_dim: 128,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// `toy-cnn` on 64-pixel patches.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("encoder.embedding_dim must be >= 1".into()));
        }
        let stride = match self.architecture_id {
            ArchitectureId::ToyCnn => 16,
            ArchitectureId::Resunet101Encoder => 32,
        };
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "encoder.input_size {} must be a positive multiple of {stride} for {}",
                self.input_size, self.architecture_id
            )));
        }
        Ok(())
    }
}

/// A finite embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("embedding must be non-empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("embedding component {bad} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Flat parameter vectors of an encoder: convolutional trunk and embedding projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub backbone: Vec<f64>,
    pub projection: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: vec![0.0; self.backbone.len()],
            projection: vec![0.0; self.projection.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.backbone.len() + self.projection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backbone parameters followed by projection parameters.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.backbone);
        v.extend_from_slice(&self.projection);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.iter().chain(&self.projection).all(|v| v.is_finite())
    }
}

/// Layer descriptors of an encoder; holds no weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArch {
    pub cfg: EncoderConfig,
    pub backbone: Backbone,
    pub projection: Linear,
}

impl EncoderArch {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = cfg.architecture_id.build_backbone();
        let mut alloc = ParamAllocator::default();
        let projection = Linear::new(&mut alloc, backbone.out_channels(), cfg.embedding_dim);
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            projection,
        })
    }

    pub fn init_params(&self) -> EncoderParams {
        let backbone = self.backbone.init_params(self.cfg.init_seed);
        let mut projection = vec![0.0; self.projection.param_count()];
        self.projection
            .init_params(&mut projection, &mut rng_for(self.cfg.init_seed, &[0x9E07]));
        EncoderParams { backbone, projection }
    }

    pub fn check_params(&self, params: &EncoderParams) -> Result<()> {
        if params.backbone.len() != self.backbone.param_len() || params.projection.len() != self.projection.param_count() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} expects {}+{} parameters, got {}+{}",
                self.cfg.architecture_id,
                self.backbone.param_len(),
                self.projection.param_count(),
                params.backbone.len(),
                params.projection.len()
            )));
        }
        Ok(())
    }

    /// Inverse of [`EncoderParams::to_flat`] for this architecture.
    pub fn params_from_flat(&self, flat: &[f64]) -> Result<EncoderParams> {
        let n = self.backbone.param_len();
        if flat.len() != n + self.projection.param_count() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} expects {} parameters, got {}",
                self.cfg.architecture_id,
                n + self.projection.param_count(),
                flat.len()
            )));
        }
        Ok(EncoderParams {
            backbone: flat[..n].to_vec(),
            projection: flat[n..].to_vec(),
        })
    }

    fn input(&self, patch: &RgbImage) -> Result<FeatureMap> {
        let n = self.cfg.input_size;
        if patch.height() != n || patch.width() != n {
            return Err(Error::Shape(format!(
                "encoder expects {n}x{n} patches, got {}x{}",
                patch.height(),
                patch.width()
            )));
        }
        Ok(FeatureMap::from_image(patch))
    }

    pub fn embed(&self, params: &EncoderParams, patch: &RgbImage) -> Result<EmbeddingVec> {
        let x = self.input(patch)?;
        let last = self.backbone.forward(&params.backbone, &x).pop().expect("at least one stage");
        self.project(params, &last)
    }

    /// Embedding of an already-computed final feature map.
    pub fn project(&self, params: &EncoderParams, last: &FeatureMap) -> Result<EmbeddingVec> {
        let pooled = global_avg_pool(last);
        EmbeddingVec::new(self.projection.forward(&params.projection, &pooled))
    }

    pub fn embed_traced(&self, params: &EncoderParams, patch: &RgbImage) -> Result<(EmbeddingVec, EmbedTrace)> {
        let x = self.input(patch)?;
        let trace = self.backbone.forward_trace(&params.backbone, &x);
        let last = trace.taps.last().expect("at least one stage");
        let pooled = global_avg_pool(last);
        let z = EmbeddingVec::new(self.projection.forward(&params.projection, &pooled))?;
        Ok((z, EmbedTrace { trace, pooled }))
    }

    /// Accumulates parameter gradients for `dL/dz` into `grads`.
    pub fn backward(&self, params: &EncoderParams, trace: &EmbedTrace, dz: &[f64], grads: &mut EncoderParams) {
        let dpooled = self
            .projection
            .backward(&params.projection, &mut grads.projection, &trace.pooled, dz);
        let last = trace.trace.taps.last().expect("at least one stage");
        let dlast = global_avg_pool_backward(&dpooled, last.shape());
        let mut tap_grads = vec![None; trace.trace.taps.len()];
        *tap_grads.last_mut().unwrap() = Some(dlast);
        self.backbone
            .backward(&params.backbone, &mut grads.backbone, &trace.trace, tap_grads);
    }
}

/// Forward activations kept for [`EncoderArch::backward`].
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    trace: BackboneTrace,
    pooled: Vec<f64>,
}

/// The encoder: architecture plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub arch: EncoderArch,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        let arch = EncoderArch::new(cfg)?;
        let params = arch.init_params();
        Ok(Self { arch, params })
    }

    pub fn from_params(cfg: &EncoderConfig, params: EncoderParams) -> Result<Self> {
        let arch = EncoderArch::new(cfg)?;
        arch.check_params(&params)?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.arch.cfg
    }

    pub fn embed(&self, patch: &RgbImage) -> Result<EmbeddingVec> {
        self.arch.embed(&self.params, patch)
    }

    /// Final backbone feature map for a patch, for inspecting activations.
    pub fn feature_map(&self, patch: &RgbImage) -> Result<FeatureMap> {
        let x = self.arch.input(patch)?;
        Ok(self
            .arch
            .backbone
            .forward(&self.params.backbone, &x)
            .pop()
            .expect("at least one stage"))
    }
}

/// The affine count scorer `f(z) = weight . z + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountScorerParams {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl CountScorerParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Weights drawn from U(-sqrt(3/dim), sqrt(3/dim)), bias 0.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0xC0C0]);
        let bound = (3.0 / dim as f64).sqrt();
        Self {
            weight: (0..dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    /// `[weight..., bias]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.push(self.bias);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let (bias, weight) = flat
            .split_last()
            .ok_or_else(|| Error::Shape("count scorer needs at least a bias".into()))?;
        Ok(Self {
            weight: weight.to_vec(),
            bias: *bias,
        })
    }
}

pub fn count_score(scorer: &CountScorerParams, z: &EmbeddingVec) -> Result<f64> {
    if scorer.dim() != z.dim() {
        return Err(Error::Shape(format!(
            "count scorer has dimension {}, embedding has {}",
            scorer.dim(),
            z.dim()
        )));
    }
    Ok(scorer.bias + scorer.weight.iter().zip(z.as_slice()).map(|(w, v)| w * v).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(n: usize, seed: u8) -> RgbImage {
        let px = (0..n * n * 3).map(|i| ((i * 31 + seed as usize * 7) % 256) as u8).collect();
        RgbImage::new(n, n, px).unwrap()
    }

    #[test]
    fn default_embedding_has_128_dims() {
        let enc = Encoder::new(&EncoderConfig::toy()).unwrap();
        let z = enc.embed(&patch(64, 1)).unwrap();
        assert_eq!(z.dim(), 128);
    }

    #[test]
    fn embedding_is_deterministic() {
        let enc = Encoder::new(&EncoderConfig::toy()).unwrap();
        let p = patch(64, 2);
        assert_eq!(enc.embed(&p).unwrap(), enc.embed(&p).unwrap());
        let again = Encoder::new(&EncoderConfig::toy()).unwrap();
        assert_eq!(enc.embed(&p).unwrap(), again.embed(&p).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let enc = Encoder::new(&EncoderConfig::toy()).unwrap();
        assert!(matches!(enc.embed(&patch(48, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn toy_preset_is_small() {
        let arch = EncoderArch::new(&EncoderConfig::toy()).unwrap();
        assert_eq!(arch.backbone.param_len(), 224 + 1168 + 4640 + 18496);
        assert_eq!(arch.projection.param_count(), 64 * 128 + 128);
        assert!(arch.backbone.param_len() + arch.projection.param_count() < 1_000_000);
    }

    #[test]
    fn resnet101_preset_layout() {
        let bb = ArchitectureId::Resunet101Encoder.build_backbone();
        assert_eq!(bb.tap_channels(), &[64, 256, 512, 1024, 2048]);
        assert_eq!(bb.total_stride(), 32);
        let blocks = bb.layers().filter(|l| matches!(l, Layer::Bottleneck(_))).count();
        assert_eq!(blocks, 33);
        let bottleneck = |i: usize, m: usize, o: usize| i * m + m + m * m * 9 + m + m * o + o;
        let mut want = 3 * 64 * 49 + 64;
        let mut in_ch = 64;
        for (blocks, mid, out) in RESNET101_STAGES {
            want += bottleneck(in_ch, mid, out) + in_ch * out + out;
            want += (blocks - 1) * bottleneck(out, mid, out);
            in_ch = out;
        }
        assert_eq!(bb.param_len(), want);
        assert_eq!(want, 42_447_488);
    }

    #[test]
    fn input_size_must_match_stride() {
        let cfg = EncoderConfig {
            input_size: 72,
            ..EncoderConfig::toy()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            embedding_dim: 0,
            ..EncoderConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn count_score_projects() {
        let z = EmbeddingVec::new(vec![3.0, -1.0, 2.0]).unwrap();
        assert_eq!(count_score(&CountScorerParams::zeros(3), &z).unwrap(), 0.0);
        let e1 = CountScorerParams {
            weight: vec![1.0, 0.0, 0.0],
            bias: 0.0,
        };
        assert_eq!(count_score(&e1, &z).unwrap(), 3.0);
        assert!(count_score(&CountScorerParams::zeros(2), &z).is_err());
    }

    #[test]
    fn scorer_flat_round_trip() {
        let s = CountScorerParams::init(5, 3);
        assert_eq!(CountScorerParams::from_flat(&s.to_flat()).unwrap(), s);
    }

    #[test]
    fn non_finite_embedding_is_rejected() {
        assert!(EmbeddingVec::new(vec![1.0, f64::NAN]).is_err());
    }
}
