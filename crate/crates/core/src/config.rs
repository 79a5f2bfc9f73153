//! The sectioned TOML run configuration shared by every CLI subcommand.
//!
//! Sections: `data`, `sampler`, `encoder`, `loss`, `pretrain`, `finetune`,
//! `postprocess`, `synth`. Every key is optional and unknown keys are
//! rejected. `RunConfig::to_toml` prints the fully populated configuration;
//! parsing that output yields the same value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::OptimizerConfig;
use crate::postprocess::PostprocessConfig;
use crate::pretrain::PretrainConfig;
use crate::sampler::SamplerConfig;
use crate::segmenter::{DecoderPreset, FinetuneConfig, SegModelConfig, CLASS_COUNT};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root with `images/`, optional `labels/` and optional `test/`.
    pub root: PathBuf,
    /// Fraction of the pool assigned to the train split (rest is validation).
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            split_ratio: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub heldout_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch_size: p.batch_size,
            seed: p.seed,
            log_every: p.log_every,
            checkpoint_every: p.checkpoint_every,
            heldout_size: p.heldout_size,
            optimizer: p.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub label_fraction: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub augment: bool,
    pub class_weights: Option<[f64; CLASS_COUNT]>,
    pub decoder: DecoderPreset,
    pub decoder_init_seed: u64,
    pub boundary_width: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        let m = SegModelConfig::default();
        Self {
            epochs: f.epochs,
            batch_size: f.batch_size,
            crop_size: f.crop_size,
            label_fraction: f.label_fraction,
            seed: f.seed,
            freeze_encoder: f.freeze_encoder,
            augment: f.augment,
            class_weights: f.class_weights,
            decoder: m.decoder,
            decoder_init_seed: m.init_seed,
            boundary_width: m.boundary_width,
            optimizer: f.optimizer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub postprocess: PostprocessConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Every section at its toy-scale preset, reading from `data/toy`.
    pub fn toy() -> Self {
        let p = PretrainConfig::toy();
        let f = FinetuneConfig::toy();
        let m = SegModelConfig::toy();
        Self {
            data: DataConfig {
                root: PathBuf::from("data/toy"),
                ..DataConfig::default()
            },
            sampler: p.sampler,
            encoder: p.encoder,
            loss: p.loss,
            pretrain: PretrainSection {
                steps: p.steps,
                batch_size: p.batch_size,
                seed: p.seed,
                log_every: p.log_every,
                checkpoint_every: p.checkpoint_every,
                heldout_size: p.heldout_size,
                optimizer: p.optimizer,
            },
            finetune: FinetuneSection {
                epochs: f.epochs,
                batch_size: f.batch_size,
                crop_size: f.crop_size,
                label_fraction: f.label_fraction,
                seed: f.seed,
                freeze_encoder: f.freeze_encoder,
                augment: f.augment,
                class_weights: f.class_weights,
                decoder: m.decoder,
                decoder_init_seed: m.init_seed,
                boundary_width: m.boundary_width,
                optimizer: f.optimizer,
            },
            postprocess: PostprocessConfig::toy(),
            synth: SynthConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            Error::Config(match line {
                Some(line) => format!("line {line}: {}", e.message()),
                None => e.message().to_string(),
            })
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            seed: p.seed,
            log_every: p.log_every,
            checkpoint_every: p.checkpoint_every,
            heldout_size: p.heldout_size,
            optimizer: p.optimizer.clone(),
            sampler: self.sampler.clone(),
            loss: self.loss.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn seg_model_config(&self) -> SegModelConfig {
        SegModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.finetune.decoder,
            class_count: CLASS_COUNT,
            init_seed: self.finetune.decoder_init_seed,
            boundary_width: self.finetune.boundary_width,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            optimizer: f.optimizer.clone(),
            crop_size: f.crop_size,
            label_fraction: f.label_fraction,
            seed: f.seed,
            freeze_encoder: f.freeze_encoder,
            class_weights: f.class_weights,
            augment: f.augment,
        }
    }

    /// Every seed the configuration carries, by name.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("data.split_seed", self.data.split_seed),
            ("encoder.init_seed", self.encoder.init_seed),
            ("pretrain.seed", self.pretrain.seed),
            ("finetune.seed", self.finetune.seed),
            ("finetune.decoder_init_seed", self.finetune.decoder_init_seed),
            ("synth.seed", self.synth.seed),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "data.split_ratio must lie in (0, 1], got {}",
                self.data.split_ratio
            )));
        }
        self.pretrain_config().validate()?;
        self.seg_model_config().validate()?;
        self.finetune_config().validate()?;
        self.synth.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn dump_parse_dump_is_a_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.finetune.class_weights = Some([1.0, 2.0, 4.5]);
        cfg.sampler = SamplerConfig::toy();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn toy_preset_is_valid_and_consistent() {
        let cfg = RunConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(cfg.pretrain_config(), PretrainConfig::toy());
        assert_eq!(cfg.finetune_config(), FinetuneConfig::toy());
        assert_eq!(cfg.seg_model_config(), SegModelConfig::toy());
    }

    #[test]
    fn shipped_toy_config_matches_preset() {
        let text = include_str!("../../../configs/toy.toml");
        assert_eq!(RunConfig::from_toml(text).unwrap(), RunConfig::toy());
    }

    #[test]
    fn parse_errors_name_the_offending_line() {
        let err = RunConfig::from_toml("[pretrain]\nsteps = 10\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = RunConfig::from_toml("bogus = 1").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[pretrain]\nstepz = 3", "[nonsense]\n", "[finetune.optimizer]\nmomentum = 0.9"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn sections_feed_module_configs() {
        let cfg = RunConfig::from_toml(
            "[encoder]\ninput_size = 64\n[sampler]\npatch_size = 64\nscale_pool = [42, 21]\nmin_shift = 5\nmax_shift = 19\n[pretrain]\nsteps = 7\n",
        )
        .unwrap();
        let p = cfg.pretrain_config();
        assert_eq!((p.steps, p.encoder.input_size, p.sampler.scale_pool.clone()), (7, 64, vec![42, 21]));
        p.validate().unwrap();
    }
}
