//! The proxy-task training loop: sample triplets, embed them with one shared
//! encoder, and minimize the scale-wise triplet loss plus the count ranking
//! loss.
//!
//! Each step draws `batch_size` triplets from distinct source images. Images
//! are visited in a shuffled order that is reshuffled every epoch. Both the
//! epoch permutation and every triplet seed are pure functions of
//! `(seed, step, slot)`, so resuming from a checkpoint reproduces an
//! uninterrupted run exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_checkpoint, read_image, save_checkpoint, Checkpoint, DatasetIndex, RgbImage, Split};
use crate::embedder::{count_score, CountScorerParams, EmbeddingVec, EncoderArch, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{
    count_ranking_loss_with_grad, scale_triplet_loss_with_grad, squared_l2, LossConfig, TripletEmbeddings,
};
use crate::nn::{Optimizer, OptimizerConfig};
use crate::sampler::{sample_triplet, SamplerConfig, Triplet};
use crate::seed::{derive_seed, rng_for};

const TAG_EPOCH: u64 = 0xE90C;
const TAG_TRIPLET: u64 = 0x7A1E;
const TAG_HELDOUT: u64 = 0x4E1D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out margin satisfaction is evaluated every `log_every` steps and at the last step.
    pub log_every: u64,
    /// Write a checkpoint every `checkpoint_every` steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Number of held-out triplets drawn from validation images.
    pub heldout_size: usize,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
            heldout_size: 64,
            optimizer: OptimizerConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl PretrainConfig {
    /// The 1/12-scale setup used with `toy-cnn`.
    pub fn toy() -> Self {
        Self {
            sampler: SamplerConfig::toy(),
            encoder: EncoderConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("pretrain.steps, batch_size and log_every must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        self.encoder.validate()?;
        if self.sampler.patch_size != self.encoder.input_size {
            return Err(Error::Config(format!(
                "sampler.patch_size ({}) must equal encoder.input_size ({})",
                self.sampler.patch_size, self.encoder.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub l_st: f64,
    pub l_cr: f64,
    pub l_total: f64,
    pub msr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub records: Vec<PretrainRecord>,
    /// Held-out margin satisfaction rate of the parameters the run started from.
    pub initial_msr: Option<f64>,
}

impl PretrainReport {
    /// CSV with columns `step,l_st,l_cr,l_total,msr`; `msr` is empty on steps without evaluation.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn final_msr(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.msr)
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Loss values and gradients of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub l_st: f64,
    pub l_cr: f64,
    pub encoder: EncoderParams,
    pub scorer: CountScorerParams,
}

fn embed_all(arch: &EncoderArch, params: &EncoderParams, patches: [&RgbImage; 3]) -> Result<[EmbeddingVec; 3]> {
    let [a, p, n] = patches;
    Ok([arch.embed(params, a)?, arch.embed(params, p)?, arch.embed(params, n)?])
}

/// `(L_ST, L_CR)` of a batch of `(anchor, positive, negative)` patches.
pub fn batch_loss(
    arch: &EncoderArch,
    params: &EncoderParams,
    scorer: &CountScorerParams,
    batch: &[[&RgbImage; 3]],
    cfg: &LossConfig,
) -> Result<(f64, f64)> {
    let z = batch
        .iter()
        .map(|t| embed_all(arch, params, *t))
        .collect::<Result<Vec<_>>>()?;
    let z = TripletEmbeddings::new(z)?;
    let l_st = crate::losses::scale_triplet_loss(&z, cfg);
    let l_cr = crate::losses::count_ranking_loss(&z.ranking_pairs(), scorer, cfg)?;
    Ok((l_st, l_cr))
}

/// Loss values plus gradients with respect to every encoder and scorer parameter.
pub fn batch_loss_and_grad(
    arch: &EncoderArch,
    params: &EncoderParams,
    scorer: &CountScorerParams,
    batch: &[[&RgbImage; 3]],
    cfg: &LossConfig,
) -> Result<BatchGradient> {
    let mut embeddings = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len() * 3);
    for t in batch {
        let mut zs = Vec::with_capacity(3);
        for patch in t {
            let (z, trace) = arch.embed_traced(params, patch)?;
            zs.push(z);
            traces.push(trace);
        }
        let [a, p, n]: [EmbeddingVec; 3] = zs.try_into().expect("three patches per triplet");
        embeddings.push([a, p, n]);
    }
    let z = TripletEmbeddings::new(embeddings)?;
    let st = scale_triplet_loss_with_grad(&z, cfg);
    let cr = count_ranking_loss_with_grad(&z.ranking_pairs(), scorer, cfg)?;
    let mut grads = params.zeros_like();
    for (i, (g_st, g_cr)) in st.grads.iter().zip(&cr.grads).enumerate() {
        for slot in 0..3 {
            let mut dz = g_st[slot].clone();
            if slot > 0 {
                for (d, c) in dz.iter_mut().zip(&g_cr[slot - 1]) {
                    *d += c;
                }
            }
            if dz.iter().any(|&v| v != 0.0) {
                arch.backward(params, &traces[3 * i + slot], &dz, &mut grads);
            }
        }
    }
    Ok(BatchGradient {
        l_st: st.loss,
        l_cr: cr.loss,
        encoder: grads,
        scorer: cr.scorer,
    })
}

/// Whether both margins hold with full slack for one embedded triplet.
pub fn margins_met(z: &[EmbeddingVec; 3], scorer: &CountScorerParams, cfg: &LossConfig) -> Result<bool> {
    let [a, p, n] = z;
    let dist_ok = squared_l2(a, n)? >= squared_l2(a, p)? + cfg.m1;
    let count_ok = count_score(scorer, p)? >= count_score(scorer, n)? + cfg.m2;
    Ok(dist_ok && count_ok)
}

/// Fraction of already-embedded triplets meeting both margins.
pub fn satisfaction_rate(z: &TripletEmbeddings, scorer: &CountScorerParams, cfg: &LossConfig) -> Result<f64> {
    let mut met = 0usize;
    for t in z.items() {
        met += margins_met(t, scorer, cfg)? as usize;
    }
    Ok(met as f64 / z.len() as f64)
}

/// Fraction of `pool` for which `d(a,n) >= d(a,p) + m1` and `f(p) >= f(n) + m2`.
pub fn margin_satisfaction_rate(
    arch: &EncoderArch,
    params: &EncoderParams,
    scorer: &CountScorerParams,
    pool: &[Triplet],
    cfg: &LossConfig,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Dataset("margin satisfaction needs a non-empty triplet pool".into()));
    }
    let z = pool
        .iter()
        .map(|t| embed_all(arch, params, [&t.anchor, &t.positive, &t.negative]))
        .collect::<Result<Vec<_>>>()?;
    satisfaction_rate(&TripletEmbeddings::new(z)?, scorer, cfg)
}

/// `n` triplets cycling over `images`, seeded independently of training.
pub fn build_heldout_pool(images: &[RgbImage], n: usize, seed: u64, cfg: &SamplerConfig) -> Result<Vec<Triplet>> {
    if n > 0 && images.is_empty() {
        return Err(Error::Dataset("held-out pool needs at least one validation image".into()));
    }
    (0..n)
        .map(|i| sample_triplet(&images[i % images.len()], derive_seed(seed, &[TAG_HELDOUT, i as u64]), cfg))
        .collect()
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState {
    pub encoder: EncoderParams,
    pub scorer: CountScorerParams,
    pub optimizer: Optimizer,
    /// Number of completed steps.
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    pub scorer: CountScorerParams,
    pub report: PretrainReport,
    pub state: PretrainState,
}

/// Stepwise driver over an in-memory image set.
pub struct Pretrainer<'a> {
    cfg: PretrainConfig,
    arch: EncoderArch,
    images: &'a [RgbImage],
    heldout: Vec<Triplet>,
    state: PretrainState,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<'a> Pretrainer<'a> {
    pub fn new(cfg: &PretrainConfig, images: &'a [RgbImage], heldout: Vec<Triplet>) -> Result<Self> {
        cfg.validate()?;
        let arch = EncoderArch::new(&cfg.encoder)?;
        let state = PretrainState {
            encoder: arch.init_params(),
            scorer: CountScorerParams::init(cfg.encoder.embedding_dim, cfg.encoder.init_seed),
            optimizer: Optimizer::new(cfg.optimizer.clone()),
            step: 0,
        };
        Self::with_state(cfg, arch, images, heldout, state)
    }

    /// Continues from a checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(cfg: &PretrainConfig, images: &'a [RgbImage], heldout: Vec<Triplet>, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let arch = EncoderArch::new(&cfg.encoder)?;
        let mut optimizer = Optimizer::new(cfg.optimizer.clone());
        optimizer.import_state(&ckpt.aux)?;
        let state = PretrainState {
            encoder: arch.params_from_flat(&ckpt.encoder_params)?,
            scorer: CountScorerParams::from_flat(ckpt.aux("scorer")?)?,
            optimizer,
            step: ckpt.step,
        };
        if state.scorer.dim() != cfg.encoder.embedding_dim {
            return Err(Error::ArchitectureMismatch("checkpoint scorer does not match embedding_dim".into()));
        }
        Self::with_state(cfg, arch, images, heldout, state)
    }

    fn with_state(
        cfg: &PretrainConfig,
        arch: EncoderArch,
        images: &'a [RgbImage],
        heldout: Vec<Triplet>,
        state: PretrainState,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("pretraining needs at least one training image".into()));
        }
        let p = cfg.sampler.patch_size;
        if let Some(img) = images.iter().find(|i| i.height() < p || i.width() < p) {
            return Err(Error::ImageTooSmall {
                height: img.height(),
                width: img.width(),
                required: p,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            images,
            heldout,
            state,
            epoch_order: None,
        })
    }

    pub fn state(&self) -> &PretrainState {
        &self.state
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn heldout(&self) -> &[Triplet] {
        &self.heldout
    }

    /// Held-out margin satisfaction rate of the current parameters, if a pool exists.
    pub fn heldout_msr(&self) -> Result<Option<f64>> {
        if self.heldout.is_empty() {
            return Ok(None);
        }
        margin_satisfaction_rate(&self.arch, &self.state.encoder, &self.state.scorer, &self.heldout, &self.cfg.loss)
            .map(Some)
    }

    fn image_at(&mut self, position: u64) -> usize {
        let n = self.images.len() as u64;
        let epoch = position / n;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.images.len()).collect();
            order.shuffle(&mut rng_for(self.cfg.seed, &[TAG_EPOCH, epoch]));
            self.epoch_order = Some((epoch, order));
        }
        self.epoch_order.as_ref().expect("just set").1[(position % n) as usize]
    }

    /// Triplets of step `step` (0-based). Slots take consecutive positions of the
    /// epoch-shuffled image sequence, so a batch never repeats an image unless
    /// `batch_size` exceeds the number of images.
    fn batch_for(&mut self, step: u64) -> Result<Vec<Triplet>> {
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|slot| {
                let idx = self.image_at(step * b + slot);
                let seed = derive_seed(self.cfg.seed, &[TAG_TRIPLET, step, slot]);
                sample_triplet(&self.images[idx], seed, &self.cfg.sampler)
            })
            .collect()
    }

    /// Runs one optimization step and returns its record.
    pub fn step(&mut self) -> Result<PretrainRecord> {
        let step = self.state.step;
        let triplets = self.batch_for(step)?;
        let batch: Vec<[&RgbImage; 3]> = triplets.iter().map(|t| [&t.anchor, &t.positive, &t.negative]).collect();
        let diverged = |detail: String| Error::Diverged { step: step + 1, detail };
        let g = batch_loss_and_grad(&self.arch, &self.state.encoder, &self.state.scorer, &batch, &self.cfg.loss)
            .map_err(|e| diverged(e.to_string()))?;
        let l_total = crate::losses::total_loss(g.l_st, g.l_cr);
        if !l_total.is_finite() {
            return Err(diverged(format!("non-finite loss (l_st={}, l_cr={})", g.l_st, g.l_cr)));
        }
        let opt = &mut self.state.optimizer;
        opt.step("backbone", &mut self.state.encoder.backbone, &g.encoder.backbone);
        opt.step("projection", &mut self.state.encoder.projection, &g.encoder.projection);
        let mut scorer = self.state.scorer.to_flat();
        opt.step("scorer", &mut scorer, &g.scorer.to_flat());
        self.state.scorer = CountScorerParams::from_flat(&scorer)?;
        if !self.state.encoder.is_finite() || !scorer.iter().all(|v| v.is_finite()) {
            return Err(diverged("non-finite parameters after update".into()));
        }
        self.state.step = step + 1;
        let msr = if self.state.step.is_multiple_of(self.cfg.log_every) || self.state.step == self.cfg.steps {
            self.heldout_msr()?
        } else {
            None
        };
        Ok(PretrainRecord {
            step: self.state.step,
            l_st: g.l_st,
            l_cr: g.l_cr,
            l_total,
            msr,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut aux = self.state.optimizer.export_state();
        aux.insert("scorer".into(), self.state.scorer.to_flat());
        Ok(Checkpoint {
            encoder_params: self.state.encoder.to_flat(),
            decoder_params: None,
            aux,
            config_snapshot: toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?,
            step: self.state.step,
        })
    }

    /// Trains until `cfg.steps` steps are complete, writing `step_NNNNNN.ckpt`
    /// files into `ckpt_dir` at the configured interval plus `final.ckpt`.
    pub fn run(mut self, ckpt_dir: Option<&Path>, mut on_record: impl FnMut(&PretrainRecord)) -> Result<PretrainOutcome> {
        let mut report = PretrainReport {
            records: Vec::new(),
            initial_msr: self.heldout_msr()?,
        };
        while self.state.step < self.cfg.steps {
            let record = self.step()?;
            on_record(&record);
            report.records.push(record);
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.state.step.is_multiple_of(every) {
                    save_checkpoint(&self.checkpoint()?, step_checkpoint_path(dir, self.state.step))?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            save_checkpoint(&self.checkpoint()?, dir.join("final.ckpt"))?;
        }
        Ok(PretrainOutcome {
            encoder: self.state.encoder.clone(),
            scorer: self.state.scorer.clone(),
            report,
            state: self.state,
        })
    }
}

pub fn step_checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

fn load_split(dataset: &DatasetIndex, split: Split) -> Result<Vec<RgbImage>> {
    dataset.split(split).map(|e| read_image(&e.image_path)).collect()
}

/// Pretrains on the train split of `dataset`, with the held-out pool drawn from its validation split.
pub fn pretrain(dataset: &DatasetIndex, cfg: &PretrainConfig, ckpt_dir: Option<&Path>) -> Result<PretrainOutcome> {
    pretrain_with(dataset, cfg, ckpt_dir, None, |_| {})
}

/// [`pretrain`] with an optional checkpoint to resume from and a per-step callback.
pub fn pretrain_with(
    dataset: &DatasetIndex,
    cfg: &PretrainConfig,
    ckpt_dir: Option<&Path>,
    resume_from: Option<&Path>,
    on_record: impl FnMut(&PretrainRecord),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train = load_split(dataset, Split::Train)?;
    let val = load_split(dataset, Split::Val)?;
    let heldout = if val.is_empty() {
        Vec::new()
    } else {
        build_heldout_pool(&val, cfg.heldout_size, cfg.seed, &cfg.sampler)?
    };
    let trainer = match resume_from {
        Some(path) => Pretrainer::resume(cfg, &train, heldout, &load_checkpoint(path)?)?,
        None => Pretrainer::new(cfg, &train, heldout)?,
    };
    trainer.run(ckpt_dir, on_record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise_images(n: usize, size: usize, seed: u64) -> Vec<RgbImage> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| RgbImage::new(size, size, (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap())
            .collect()
    }

    fn small_cfg(steps: u64) -> PretrainConfig {
        PretrainConfig {
            steps,
            batch_size: 2,
            log_every: 2,
            heldout_size: 4,
            sampler: SamplerConfig {
                patch_size: 16,
                scale_pool: vec![8, 4],
                min_shift: 1,
                max_shift: 3,
            },
            encoder: EncoderConfig {
                input_size: 16,
                embedding_dim: 8,
                ..EncoderConfig::toy()
            },
            ..PretrainConfig::default()
        }
    }

    fn e(v: &[f64]) -> EmbeddingVec {
        EmbeddingVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn one_step_gives_one_consistent_record() {
        let images = noise_images(3, 20, 1);
        let cfg = small_cfg(1);
        let out = Pretrainer::new(&cfg, &images, Vec::new()).unwrap().run(None, |_| {}).unwrap();
        assert_eq!(out.report.records.len(), 1);
        let r = &out.report.records[0];
        assert_eq!(r.l_total, r.l_st + r.l_cr);
        assert_eq!(r.step, 1);
    }

    #[test]
    fn zero_learning_rate_gives_constant_losses_for_a_fixed_batch() {
        let images = noise_images(1, 20, 2);
        let mut cfg = small_cfg(3);
        cfg.batch_size = 1;
        cfg.optimizer.learning_rate = 0.0;
        let mut t = Pretrainer::new(&cfg, &images, Vec::new()).unwrap();
        let start = t.state().encoder.clone();
        let batch = t.batch_for(0).unwrap();
        let b: Vec<[&RgbImage; 3]> = batch.iter().map(|t| [&t.anchor, &t.positive, &t.negative]).collect();
        let before = batch_loss(t.arch(), &start, &t.state().scorer, &b, &cfg.loss).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        assert_eq!(t.state().encoder, start);
        let after = batch_loss(t.arch(), &t.state().encoder, &t.state().scorer, &b, &cfg.loss).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn resume_is_bit_identical() {
        let images = noise_images(3, 20, 3);
        let heldout = build_heldout_pool(&images, 2, 5, &small_cfg(1).sampler).unwrap();
        let straight = Pretrainer::new(&small_cfg(6), &images, heldout.clone())
            .unwrap()
            .run(None, |_| {})
            .unwrap();
        let first = Pretrainer::new(&small_cfg(3), &images, heldout.clone()).unwrap();
        let first = first.run(None, |_| {}).unwrap();
        let ckpt = {
            let t = Pretrainer::with_state(
                &small_cfg(3),
                EncoderArch::new(&small_cfg(3).encoder).unwrap(),
                &images,
                heldout.clone(),
                first.state,
            )
            .unwrap();
            t.checkpoint().unwrap()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let resumed = Pretrainer::resume(&small_cfg(6), &images, heldout, &load_checkpoint(&path).unwrap())
            .unwrap()
            .run(None, |_| {})
            .unwrap();
        assert_eq!(resumed.encoder, straight.encoder);
        assert_eq!(resumed.scorer, straight.scorer);
        assert_eq!(resumed.report.records[..], straight.report.records[3..]);
    }

    #[test]
    fn checkpoints_are_written_at_the_interval() {
        let images = noise_images(2, 20, 4);
        let mut cfg = small_cfg(4);
        cfg.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        Pretrainer::new(&cfg, &images, Vec::new()).unwrap().run(Some(dir.path()), |_| {}).unwrap();
        for name in ["step_000002.ckpt", "step_000004.ckpt", "final.ckpt"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let ck = load_checkpoint(dir.path().join("step_000002.ckpt")).unwrap();
        assert_eq!(ck.step, 2);
        let back: PretrainConfig = toml::from_str(&ck.config_snapshot).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn batches_cycle_through_distinct_images() {
        let images = noise_images(4, 20, 5);
        let mut cfg = small_cfg(1);
        cfg.batch_size = 4;
        let mut t = Pretrainer::new(&cfg, &images, Vec::new()).unwrap();
        let mut seen: Vec<usize> = (0..4).map(|j| t.image_at(j)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn satisfaction_rate_edge_cases() {
        let cfg = LossConfig::default();
        let same = [e(&[0.3, 0.3]), e(&[0.3, 0.3]), e(&[0.3, 0.3])];
        let scorer = CountScorerParams {
            weight: vec![1.0, 0.0],
            bias: 0.0,
        };
        let z = TripletEmbeddings::new(vec![same.clone(), same]).unwrap();
        assert_eq!(satisfaction_rate(&z, &scorer, &cfg).unwrap(), 0.0);
        // d(a,p) = 0, d(a,n) = 4 >= 0 + 1; f(p) = 2 >= f(n) + 1 = 1.
        let good = [e(&[2.0, 0.0]), e(&[2.0, 0.0]), e(&[0.0, 0.0])];
        let z = TripletEmbeddings::new(vec![good.clone(), good]).unwrap();
        assert_eq!(satisfaction_rate(&z, &scorer, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn empty_pool_is_rejected() {
        let arch = EncoderArch::new(&small_cfg(1).encoder).unwrap();
        let params = arch.init_params();
        let r = margin_satisfaction_rate(&arch, &params, &CountScorerParams::zeros(8), &[], &LossConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn mismatched_patch_and_input_size_is_a_config_error() {
        let mut cfg = small_cfg(1);
        cfg.encoder.input_size = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn small_images_are_rejected() {
        let images = noise_images(1, 12, 6);
        assert!(matches!(
            Pretrainer::new(&small_cfg(1), &images, Vec::new()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn report_csv_has_documented_columns() {
        let report = PretrainReport {
            records: vec![
                PretrainRecord {
                    step: 1,
                    l_st: 0.5,
                    l_cr: 0.25,
                    l_total: 0.75,
                    msr: None,
                },
                PretrainRecord {
                    step: 2,
                    l_st: 0.0,
                    l_cr: 1.0,
                    l_total: 1.0,
                    msr: Some(0.5),
                },
            ],
            initial_msr: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,l_st,l_cr,l_total,msr\n1,0.5,0.25,0.75,\n2,0.0,1.0,1.0,0.5\n");
    }
}
