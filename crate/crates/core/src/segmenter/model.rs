use serde::{Deserialize, Serialize};

use crate::dataio::{Checkpoint, RgbImage};
use crate::embedder::{ArchitectureId, EncoderArch, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{upsample2, upsample2_backward, Activation, Backbone, BackboneTrace, ConvAct, ConvActCache, FeatureMap, ParamAllocator};
use crate::seed::rng_for;

use super::ternary::TernaryMask;

pub const CLASS_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderPreset {
    /// Per encoder tap: upsample x2, concatenate the tap, 3x3 conv back to the
    /// tap's width. A last stage restores full resolution and also sees the
    /// input image.
    UnetSkip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderPreset,
    pub class_count: usize,
    /// Seed of the decoder initialization.
    pub init_seed: u64,
    /// Boundary width in pixels used to build ternary targets.
    pub boundary_width: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderPreset::UnetSkip,
            class_count: CLASS_COUNT,
            init_seed: 0,
            boundary_width: 2,
        }
    }
}

impl SegModelConfig {
    /// `toy-cnn` with 1-pixel boundaries.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            boundary_width: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.class_count != CLASS_COUNT {
            return Err(Error::Config(format!("class_count must be {CLASS_COUNT}, got {}", self.class_count)));
        }
        if self.boundary_width == 0 {
            return Err(Error::Config("boundary_width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    /// `levels[i]` fuses the upsampled deeper map with tap `i`.
    levels: Vec<ConvAct>,
    skip_channels: Vec<usize>,
    fuse_input: ConvAct,
    head: ConvAct,
    param_len: usize,
}

struct DecoderTrace {
    levels: Vec<ConvActCache>,
    fuse_input: ConvActCache,
    head: ConvActCache,
}

impl Decoder {
    fn new(backbone: &Backbone, act: Activation) -> Self {
        let ch = backbone.tap_channels().to_vec();
        for (i, &s) in backbone.tap_strides().iter().enumerate() {
            assert_eq!(s, 2 << i, "decoder expects taps at strides 2, 4, 8, ...");
        }
        let mut alloc = ParamAllocator::default();
        let levels = (0..ch.len() - 1)
            .map(|i| ConvAct::new(&mut alloc, ch[i + 1] + ch[i], ch[i], 3, 1, Some(act)))
            .collect();
        let fuse_input = ConvAct::new(&mut alloc, ch[0] + 3, ch[0], 3, 1, Some(act));
        let head = ConvAct::new(&mut alloc, ch[0], CLASS_COUNT, 1, 1, None);
        Self {
            levels,
            skip_channels: ch,
            fuse_input,
            head,
            param_len: alloc.len(),
        }
    }

    fn convs(&self) -> impl Iterator<Item = &ConvAct> {
        self.levels.iter().chain([&self.fuse_input, &self.head])
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.param_len];
        for (i, c) in self.convs().enumerate() {
            c.conv.init_params(&mut p, &mut rng_for(seed, &[0xDEC0, i as u64]));
        }
        p
    }

    fn forward(&self, params: &[f64], taps: &[FeatureMap], input: &FeatureMap) -> (FeatureMap, DecoderTrace) {
        let mut h = taps.last().expect("at least one tap").clone();
        let mut level_caches = Vec::with_capacity(self.levels.len());
        for i in (0..self.levels.len()).rev() {
            let (y, cache) = self.levels[i].forward(params, &upsample2(&h).concat(&taps[i]));
            level_caches.push(cache);
            h = y;
        }
        level_caches.reverse();
        let (h, fuse_cache) = self.fuse_input.forward(params, &upsample2(&h).concat(input));
        let (logits, head_cache) = self.head.forward(params, &h);
        (
            logits,
            DecoderTrace {
                levels: level_caches,
                fuse_input: fuse_cache,
                head: head_cache,
            },
        )
    }

    /// Accumulates decoder gradients and returns the gradient at every tap.
    fn backward(&self, params: &[f64], grads: &mut [f64], trace: &DecoderTrace, dlogits: FeatureMap) -> Vec<Option<FeatureMap>> {
        let ch = &self.skip_channels;
        let dh = self.head.backward(params, grads, &trace.head, dlogits, true).expect("input grad");
        let dcat = self
            .fuse_input
            .backward(params, grads, &trace.fuse_input, dh, true)
            .expect("input grad");
        let (du, _) = dcat.split_channels(ch[0]);
        let mut dh = upsample2_backward(&du);
        let mut tap_grads = vec![None; ch.len()];
        for i in 0..self.levels.len() {
            let dcat = self.levels[i]
                .backward(params, grads, &trace.levels[i], dh, true)
                .expect("input grad");
            let (du, dskip) = dcat.split_channels(ch[i + 1]);
            tap_grads[i] = Some(dskip);
            dh = upsample2_backward(&du);
        }
        let last = tap_grads.last_mut().expect("at least one tap");
        match last {
            Some(g) => g.add_assign(&dh),
            None => *last = Some(dh),
        }
        tap_grads
    }
}

/// Weights of a segmentation model.
#[derive(Debug, Clone, PartialEq)]
pub struct SegParams {
    pub encoder: EncoderParams,
    pub decoder: Vec<f64>,
}

impl SegParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: vec![0.0; self.decoder.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.iter().all(|v| v.is_finite())
    }
}

/// Activations kept by [`SegModel::forward_trace`].
pub struct SegTrace {
    backbone: BackboneTrace,
    decoder: DecoderTrace,
}

/// Per-pixel class probabilities, `probs[(y * width + x) * 3 + class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn get(&self, y: usize, x: usize) -> [f64; CLASS_COUNT] {
        let i = (y * self.width + x) * CLASS_COUNT;
        [self.probs[i], self.probs[i + 1], self.probs[i + 2]]
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> TernaryMask {
        let classes = self
            .probs
            .chunks_exact(CLASS_COUNT)
            .map(|p| {
                let mut best = 0;
                for c in 1..CLASS_COUNT {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        TernaryMask::new(self.height, self.width, classes).expect("argmax yields ternary classes")
    }
}

/// Per-pixel softmax over the channel axis of a logit map, channels-last output.
pub fn softmax_pixels(logits: &FeatureMap) -> Vec<f64> {
    let n = logits.plane();
    let mut out = vec![0.0; n * CLASS_COUNT];
    for i in 0..n {
        let z: [f64; CLASS_COUNT] = std::array::from_fn(|c| logits.data[c * n + i]);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: [f64; CLASS_COUNT] = std::array::from_fn(|c| (z[c] - m).exp());
        let s: f64 = e.iter().sum();
        for c in 0..CLASS_COUNT {
            out[i * CLASS_COUNT + c] = e[c] / s;
        }
    }
    out
}

/// The U-shaped segmentation network: the encoder trunk plus a decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    cfg: SegModelConfig,
    encoder: EncoderArch,
    decoder: Decoder,
}

impl SegModel {
    pub fn new(cfg: &SegModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderArch::new(&cfg.encoder)?;
        let act = match cfg.encoder.architecture_id {
            ArchitectureId::ToyCnn => Activation::Silu,
            ArchitectureId::Resunet101Encoder => Activation::Relu,
        };
        let decoder = Decoder::new(&encoder.backbone, act);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.cfg
    }

    pub fn encoder_arch(&self) -> &EncoderArch {
        &self.encoder
    }

    pub fn decoder_param_len(&self) -> usize {
        self.decoder.param_len
    }

    /// Side lengths of model inputs must be multiples of this.
    pub fn stride(&self) -> usize {
        self.encoder.backbone.total_stride()
    }

    /// Randomly initialized encoder and decoder (train-from-scratch weights).
    pub fn init_params(&self) -> SegParams {
        SegParams {
            encoder: self.encoder.init_params(),
            decoder: self.decoder.init_params(self.cfg.init_seed),
        }
    }

    /// Copies `pretrained` verbatim and draws a fresh decoder from `init_seed`.
    pub fn transfer_encoder(&self, pretrained: &EncoderParams) -> Result<SegParams> {
        self.encoder.check_params(pretrained)?;
        Ok(SegParams {
            encoder: pretrained.clone(),
            decoder: self.decoder.init_params(self.cfg.init_seed),
        })
    }

    pub fn check_params(&self, params: &SegParams) -> Result<()> {
        self.encoder.check_params(&params.encoder)?;
        if params.decoder.len() != self.decoder.param_len {
            return Err(Error::ArchitectureMismatch(format!(
                "decoder expects {} parameters, got {}",
                self.decoder.param_len,
                params.decoder.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let s = self.stride();
        if x.channels != 3 || x.height == 0 || !x.height.is_multiple_of(s) || !x.width.is_multiple_of(s) || x.width == 0 {
            return Err(Error::Shape(format!(
                "model input must be 3 channels with sides that are positive multiples of {s}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_trace(&self, params: &SegParams, x: &FeatureMap) -> Result<(FeatureMap, SegTrace)> {
        self.check_input(x)?;
        let backbone = self.encoder.backbone.forward_trace(&params.encoder.backbone, x);
        let (logits, decoder) = self.decoder.forward(&params.decoder, &backbone.taps, x);
        Ok((logits, SegTrace { backbone, decoder }))
    }

    pub fn forward(&self, params: &SegParams, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let taps = self.encoder.backbone.forward(&params.encoder.backbone, x);
        Ok(self.decoder.forward(&params.decoder, &taps, x).0)
    }

    /// Accumulates gradients of a loss with logit gradient `dlogits`; the
    /// encoder trunk is skipped when `train_encoder` is false.
    pub fn backward(&self, params: &SegParams, trace: &SegTrace, dlogits: FeatureMap, grads: &mut SegParams, train_encoder: bool) {
        let tap_grads = self.decoder.backward(&params.decoder, &mut grads.decoder, &trace.decoder, dlogits);
        if train_encoder {
            self.encoder
                .backbone
                .backward(&params.encoder.backbone, &mut grads.encoder.backbone, &trace.backbone, tap_grads);
        }
    }

    /// Class probabilities at every pixel of `image`. Inputs whose sides are
    /// not multiples of the stride are edge-padded and the output cropped back.
    pub fn predict(&self, params: &SegParams, image: &RgbImage) -> Result<ProbabilityMap> {
        let (h, w) = (image.height(), image.width());
        let s = self.stride();
        let (ph, pw) = (h.div_ceil(s).max(1) * s, w.div_ceil(s).max(1) * s);
        let padded = pad_edge(image, ph, pw)?;
        let logits = self.forward(params, &FeatureMap::from_image(&padded))?;
        let full = softmax_pixels(&logits);
        let mut probs = Vec::with_capacity(h * w * CLASS_COUNT);
        for y in 0..h {
            let row = y * pw * CLASS_COUNT;
            probs.extend_from_slice(&full[row..row + w * CLASS_COUNT]);
        }
        Ok(ProbabilityMap { height: h, width: w, probs })
    }

    pub fn to_checkpoint(&self, params: &SegParams, config_snapshot: String, step: u64) -> Checkpoint {
        Checkpoint {
            encoder_params: params.encoder.to_flat(),
            decoder_params: Some(params.decoder.clone()),
            aux: Default::default(),
            config_snapshot,
            step,
        }
    }

    pub fn params_from_checkpoint(&self, ckpt: &Checkpoint) -> Result<SegParams> {
        let decoder = ckpt
            .decoder_params
            .clone()
            .ok_or_else(|| Error::ArchitectureMismatch("checkpoint holds no decoder weights".into()))?;
        let params = SegParams {
            encoder: self.encoder.params_from_flat(&ckpt.encoder_params)?,
            decoder,
        };
        self.check_params(&params)?;
        Ok(params)
    }
}

/// Extends `image` to `height` x `width` by repeating its last row and column.
pub fn pad_edge(image: &RgbImage, height: usize, width: usize) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    if height < h || width < w {
        return Err(Error::Shape("padding target is smaller than the image".into()));
    }
    if (height, width) == (h, w) {
        return Ok(image.clone());
    }
    let mut px = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let sy = y.min(h - 1);
        for x in 0..width {
            let i = (sy * w + x.min(w - 1)) * 3;
            px.extend_from_slice(&image.pixels()[i..i + 3]);
        }
    }
    RgbImage::new(height, width, px)
}

/// Class-weighted mean softmax cross-entropy over every pixel of a logit map
/// and its gradient with respect to the logits, scaled by `1 / normalizer`.
pub fn cross_entropy(logits: &FeatureMap, target: &TernaryMask, weights: &[f64; CLASS_COUNT], normalizer: f64) -> (f64, FeatureMap) {
    assert_eq!((logits.height, logits.width), (target.height(), target.width()), "target size");
    let n = logits.plane();
    let probs = softmax_pixels(logits);
    let mut loss = 0.0;
    let mut grad = FeatureMap::zeros(CLASS_COUNT, logits.height, logits.width);
    for (i, &t) in target.classes().iter().enumerate() {
        let t = t as usize;
        let wt = weights[t];
        loss -= wt * probs[i * CLASS_COUNT + t].max(f64::MIN_POSITIVE).ln();
        for c in 0..CLASS_COUNT {
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad.data[c * n + i] = wt * (probs[i * CLASS_COUNT + c] - onehot) / normalizer;
        }
    }
    (loss / normalizer, grad)
}
