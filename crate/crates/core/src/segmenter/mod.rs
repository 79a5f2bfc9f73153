//! Target-task segmentation: ternary ground truth, the U-shaped model,
//! encoder transfer, fine-tuning and prediction.

mod finetune;
mod model;
mod ternary;

pub use finetune::{
    finetune, finetune_with, label_subset, load_labeled_split, mean_aji, predict_instances, EpochRecord,
    FinetuneConfig, FinetuneReport, LabeledImage,
};
pub use model::{
    cross_entropy, pad_edge, softmax_pixels, DecoderPreset, ProbabilityMap, SegModel, SegModelConfig, SegParams,
    SegTrace, CLASS_COUNT,
};
pub use ternary::{instance_to_ternary, TernaryMask, BACKGROUND, BODY, BOUNDARY};

use crate::embedder::EncoderParams;
use crate::error::Result;

/// Segmentation weights with `pretrained` as the encoder and a freshly seeded decoder.
pub fn transfer_encoder(pretrained: &EncoderParams, model_cfg: &SegModelConfig) -> Result<SegParams> {
    SegModel::new(model_cfg)?.transfer_encoder(pretrained)
}
