use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_image, read_label_map, DatasetIndex, InstanceLabelMap, RgbImage, Split};
use crate::error::{Error, Result};
use crate::metrics::aji;
use crate::nn::{FeatureMap, Optimizer, OptimizerConfig};
use crate::postprocess::{ternary_to_instances, PostprocessConfig};
use crate::seed::rng_for;

use super::model::{cross_entropy, SegModel, SegParams, CLASS_COUNT};
use super::ternary::{instance_to_ternary, TernaryMask};

const TAG_SUBSET: u64 = 0x1ABE;
const TAG_EPOCH: u64 = 0xE90C;
const TAG_CROP: u64 = 0xC409;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub crop_size: usize,
    /// Fraction of labeled training images used, chosen as whole images.
    pub label_fraction: f64,
    pub seed: u64,
    /// Keep the encoder trunk fixed and train only the decoder.
    pub freeze_encoder: bool,
    /// Per-class cross-entropy weights (background, body, boundary); unweighted when absent.
    pub class_weights: Option<[f64; CLASS_COUNT]>,
    /// Random flips and 90-degree rotations of training crops.
    pub augment: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            crop_size: 256,
            label_fraction: 1.0,
            seed: 0,
            freeze_encoder: false,
            class_weights: None,
            augment: true,
        }
    }
}

impl FinetuneConfig {
    /// 64-pixel crops, 60 epochs at learning rate 3e-3.
    pub fn toy() -> Self {
        Self {
            epochs: 60,
            crop_size: 64,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..OptimizerConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::Config("finetune.epochs, batch_size and crop_size must be >= 1".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "finetune.label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("finetune.class_weights must be finite and >= 0".into()));
            }
        }
        self.optimizer.validate()
    }
}

/// An image with its instance labels and a name for reports.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: RgbImage,
    pub labels: InstanceLabelMap,
}

pub fn load_labeled_split(dataset: &DatasetIndex, split: Split) -> Result<Vec<LabeledImage>> {
    dataset
        .split(split)
        .map(|e| {
            let path = e
                .label_path
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("image '{}' has no label map", e.stem)))?;
            let image = read_image(&e.image_path)?;
            let labels = read_label_map(path)?;
            if (labels.height(), labels.width()) != (image.height(), image.width()) {
                return Err(Error::Dataset(format!("label map of '{}' does not match its image size", e.stem)));
            }
            Ok(LabeledImage {
                id: e.stem.clone(),
                image,
                labels,
            })
        })
        .collect()
}

/// Indices of the seeded labeled subset: `max(1, round(fraction * n))` images.
pub fn label_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).clamp(1.min(n), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[TAG_SUBSET]));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_aji: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneReport {
    pub epochs: Vec<EpochRecord>,
    /// Ids of the training images that were used.
    pub used_images: Vec<String>,
}

impl FinetuneReport {
    /// CSV with columns `epoch,loss,val_aji`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::pretrain::csv_error(path, e))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| crate::pretrain::csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Instance prediction for one image: probabilities, argmax, post-processing.
pub fn predict_instances(model: &SegModel, params: &SegParams, image: &RgbImage, post: &PostprocessConfig) -> Result<InstanceLabelMap> {
    Ok(ternary_to_instances(&model.predict(params, image)?.argmax(), post))
}

/// Mean AJI of predicted instances over `images`.
pub fn mean_aji(model: &SegModel, params: &SegParams, images: &[LabeledImage], post: &PostprocessConfig) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Dataset("AJI needs at least one labeled image".into()));
    }
    let mut total = 0.0;
    for item in images {
        total += aji(&item.labels, &predict_instances(model, params, &item.image, post)?)?;
    }
    Ok(total / images.len() as f64)
}

/// Applies one of the eight square symmetries to a channels-first map.
fn transform_map<T: Copy>(data: &[T], channels: usize, n: usize, code: u8) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        let plane = &data[c * n * n..(c + 1) * n * n];
        for y in 0..n {
            for x in 0..n {
                let (mut sy, mut sx) = (y, x);
                if code & 4 != 0 {
                    (sy, sx) = (sx, sy);
                }
                if code & 2 != 0 {
                    sy = n - 1 - sy;
                }
                if code & 1 != 0 {
                    sx = n - 1 - sx;
                }
                out.push(plane[sy * n + sx]);
            }
        }
    }
    out
}

struct TrainItem {
    id: String,
    input: FeatureMap,
    target: TernaryMask,
}

/// Fine-tunes `params` on `train`, reporting loss and (if `val` is non-empty)
/// validation AJI after every epoch.
pub fn finetune(
    model: &SegModel,
    params: SegParams,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &FinetuneConfig,
    post: &PostprocessConfig,
) -> Result<(SegParams, FinetuneReport)> {
    finetune_with(model, params, train, val, cfg, post, |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn finetune_with(
    model: &SegModel,
    mut params: SegParams,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &FinetuneConfig,
    post: &PostprocessConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SegParams, FinetuneReport)> {
    cfg.validate()?;
    model.check_params(&params)?;
    let s = model.stride();
    if !cfg.crop_size.is_multiple_of(s) {
        return Err(Error::Config(format!("finetune.crop_size {} must be a multiple of {s}", cfg.crop_size)));
    }
    if train.is_empty() {
        return Err(Error::Dataset("fine-tuning needs labeled training images".into()));
    }
    let items: Vec<TrainItem> = label_subset(train.len(), cfg.label_fraction, cfg.seed)
        .into_iter()
        .map(|i| {
            let t = &train[i];
            if t.image.height() < cfg.crop_size || t.image.width() < cfg.crop_size {
                return Err(Error::ImageTooSmall {
                    height: t.image.height(),
                    width: t.image.width(),
                    required: cfg.crop_size,
                });
            }
            Ok(TrainItem {
                id: t.id.clone(),
                input: FeatureMap::from_image(&t.image),
                target: instance_to_ternary(&t.labels, model.config().boundary_width),
            })
        })
        .collect::<Result<_>>()?;
    let weights = cfg.class_weights.unwrap_or([1.0; CLASS_COUNT]);
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut report = FinetuneReport {
        epochs: Vec::new(),
        used_images: items.iter().map(|t| t.id.clone()).collect(),
    };
    let c = cfg.crop_size;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[TAG_EPOCH, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zeros_like();
            let normalizer = (chunk.len() * c * c) as f64;
            let mut batch_loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                let item = &items[i];
                let mut rng = rng_for(cfg.seed, &[TAG_CROP, epoch as u64, b as u64, j as u64]);
                let y0 = rng.gen_range(0..=item.input.height - c);
                let x0 = rng.gen_range(0..=item.input.width - c);
                let code = if cfg.augment { rng.gen_range(0..8u8) } else { 0 };
                let (input, target) = crop_pair(item, y0, x0, c, code)?;
                let (logits, trace) = model.forward_trace(&params, &input)?;
                let (loss, dlogits) = cross_entropy(&logits, &target, &weights, normalizer);
                batch_loss += loss;
                model.backward(&params, &trace, dlogits, &mut grads, !cfg.freeze_encoder);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step: (epoch * order.len().div_ceil(cfg.batch_size) + b + 1) as u64,
                    detail: format!("non-finite cross-entropy in epoch {}", epoch + 1),
                });
            }
            if !cfg.freeze_encoder {
                opt.step("backbone", &mut params.encoder.backbone, &grads.encoder.backbone);
            }
            opt.step("decoder", &mut params.decoder, &grads.decoder);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    step: (epoch * order.len().div_ceil(cfg.batch_size) + b + 1) as u64,
                    detail: "non-finite parameters after update".into(),
                });
            }
            loss_sum += batch_loss;
            steps += 1;
        }
        let val_aji = if val.is_empty() {
            None
        } else {
            Some(mean_aji(model, &params, val, post)?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / steps as f64,
            val_aji,
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok((params, report))
}

fn crop_pair(item: &TrainItem, y0: usize, x0: usize, c: usize, code: u8) -> Result<(FeatureMap, TernaryMask)> {
    let (h, w) = (item.input.height, item.input.width);
    let mut data = Vec::with_capacity(3 * c * c);
    for ch in 0..3 {
        for y in y0..y0 + c {
            let row = ch * h * w + y * w;
            data.extend_from_slice(&item.input.data[row + x0..row + x0 + c]);
        }
    }
    let mut classes = Vec::with_capacity(c * c);
    for y in y0..y0 + c {
        classes.extend_from_slice(&item.target.classes()[y * w + x0..y * w + x0 + c]);
    }
    if code != 0 {
        data = transform_map(&data, 3, c, code);
        classes = transform_map(&classes, 1, c, code);
    }
    Ok((FeatureMap::from_vec(3, c, c, data), TernaryMask::new(c, c, classes)?))
}
