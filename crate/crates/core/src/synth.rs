//! Seeded synthetic "tissue": dark elliptical nuclei on a light background
//! with additive Gaussian noise, together with exact instance labels.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{write_image, write_label_map, InstanceLabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::sampler::{sample_triplet, InstanceCentroids, SamplerConfig, Triplet};
use crate::seed::{derive_seed, rng_for};

pub const BACKGROUND_RGB: [f64; 3] = [232.0, 196.0, 214.0];
pub const NUCLEUS_RGB: [f64; 3] = [92.0, 58.0, 138.0];

const TAG_IMAGE: u64 = 0x1A6E;
const TAG_TEST: u64 = 0x7E57;
const TAG_POOL: u64 = 0x9001;
const MAX_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Inclusive range for the number of nuclei per image.
    pub nuclei_count_range: (usize, usize),
    /// Inclusive range for the semi-major axis, in pixels.
    pub radius_range: (f64, f64),
    pub overlap_allowed: bool,
    /// Minimum Chebyshev gap in pixels between distinct nuclei when overlap is off.
    pub min_separation: usize,
    pub texture_noise_sd: f64,
    pub seed: u64,
    /// Images written to `images/` + `labels/` by [`write_dataset`].
    pub num_images: usize,
    /// Images written to `test/images/` + `test/labels/`.
    pub num_test_images: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            nuclei_count_range: (10, 20),
            radius_range: (3.0, 6.0),
            overlap_allowed: false,
            min_separation: 1,
            texture_noise_sd: 8.0,
            seed: 0,
            num_images: 30,
            num_test_images: 14,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (cmin, cmax) = self.nuclei_count_range;
        let (rmin, rmax) = self.radius_range;
        if cmin > cmax {
            return Err(Error::Config(format!("synth.nuclei_count_range ({cmin}, {cmax}) is empty")));
        }
        if !(rmin >= 1.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::Config(format!(
                "synth.radius_range ({rmin}, {rmax}) must satisfy 1 <= min <= max"
            )));
        }
        if (self.image_size as f64) < 2.0 * rmax {
            return Err(Error::Config(format!(
                "synth.image_size {} must be at least twice the largest radius {rmax}",
                self.image_size
            )));
        }
        if !(self.texture_noise_sd >= 0.0 && self.texture_noise_sd.is_finite()) {
            return Err(Error::Config("synth.texture_noise_sd must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// An ellipse with semi-axes `a >= b` rotated by `theta`.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn random(rng: &mut impl Rng, size: usize, (rmin, rmax): (f64, f64)) -> Self {
        let a = if rmin == rmax { rmin } else { rng.gen_range(rmin..=rmax) };
        let ratio = rng.gen_range(1.0..=2.0);
        let lo = a;
        let hi = size as f64 - a;
        let mut coord = || if lo < hi { rng.gen_range(lo..=hi) } else { size as f64 / 2.0 };
        let cy = coord();
        let cx = coord();
        Self {
            cy,
            cx,
            a,
            b: a / ratio,
            theta: rng.gen_range(0.0..std::f64::consts::PI),
        }
    }

    /// Pixels whose centres fall inside the ellipse; never empty.
    fn footprint(&self, size: usize) -> Vec<(usize, usize)> {
        let (s, c) = self.theta.sin_cos();
        let y0 = (self.cy - self.a).floor().max(0.0) as usize;
        let y1 = ((self.cy + self.a).ceil() as usize).min(size);
        let x0 = (self.cx - self.a).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.a).ceil() as usize).min(size);
        let mut px = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - self.cy;
                let dx = x as f64 + 0.5 - self.cx;
                let u = (dx * c + dy * s) / self.a;
                let v = (-dx * s + dy * c) / self.b;
                if u * u + v * v <= 1.0 {
                    px.push((y, x));
                }
            }
        }
        if px.is_empty() {
            let y = (self.cy as usize).min(size - 1);
            let x = (self.cx as usize).min(size - 1);
            px.push((y, x));
        }
        px
    }
}

/// Renders one image and its label map from `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<(RgbImage, InstanceLabelMap)> {
    cfg.validate()?;
    let n = cfg.image_size;
    let mut rng = rng_for(cfg.seed, &[0x5E7]);
    let (cmin, cmax) = cfg.nuclei_count_range;
    let count = rng.gen_range(cmin..=cmax);
    let mut labels = InstanceLabelMap::background(n, n);
    // Pixels within `min_separation` of an existing nucleus.
    let mut blocked = vec![false; n * n];
    let gap = cfg.min_separation as isize;
    for id in 1..=count as u32 {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let px = Ellipse::random(&mut rng, n, cfg.radius_range).footprint(n);
            if cfg.overlap_allowed {
                let mut trial = labels.clone();
                for &(y, x) in &px {
                    trial.set(y, x, id);
                }
                if trial.instance_count() == id as usize {
                    labels = trial;
                    placed = true;
                    break;
                }
            } else if px.iter().all(|&(y, x)| !blocked[y * n + x]) {
                for &(y, x) in &px {
                    labels.set(y, x, id);
                    for dy in -gap..=gap {
                        for dx in -gap..=gap {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                                blocked[yy as usize * n + xx as usize] = true;
                            }
                        }
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place nucleus {id} of {count} in a {n}x{n} image after {MAX_ATTEMPTS} attempts"
            )));
        }
    }
    let noise = if cfg.texture_noise_sd > 0.0 {
        Some(Normal::new(0.0, cfg.texture_noise_sd).expect("sd validated"))
    } else {
        None
    };
    let mut pixels = Vec::with_capacity(n * n * 3);
    for &id in labels.labels() {
        let base = if id == 0 { BACKGROUND_RGB } else { NUCLEUS_RGB };
        for v in base {
            let jitter = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            pixels.push((v + jitter).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((RgbImage::new(n, n, pixels)?, labels))
}

/// Image `index` of a generated collection; each index has its own seed.
pub fn generate_nth(cfg: &SynthConfig, index: usize) -> Result<(RgbImage, InstanceLabelMap)> {
    generate(&cfg.with_seed(derive_seed(cfg.seed, &[TAG_IMAGE, index as u64])))
}

/// Held-back test image `index`, seeded apart from [`generate_nth`].
pub fn generate_test_nth(cfg: &SynthConfig, index: usize) -> Result<(RgbImage, InstanceLabelMap)> {
    generate(&cfg.with_seed(derive_seed(cfg.seed, &[TAG_TEST, index as u64])))
}

/// Writes `num_images` pairs to `<root>/{images,labels}` and `num_test_images`
/// pairs to `<root>/test/{images,labels}` as `synth_NNNN.png`.
pub fn write_dataset(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<()> {
    cfg.validate()?;
    let root = root.as_ref();
    let write_split = |dir: &Path, n: usize, gen: fn(&SynthConfig, usize) -> Result<(RgbImage, InstanceLabelMap)>| {
        for sub in ["images", "labels"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for i in 0..n {
            let (img, lab) = gen(cfg, i)?;
            let name = format!("synth_{i:04}.png");
            write_image(&img, dir.join("images").join(&name))?;
            write_label_map(&lab, dir.join("labels").join(&name))?;
        }
        Ok::<(), Error>(())
    };
    write_split(root, cfg.num_images, generate_nth)?;
    if cfg.num_test_images > 0 {
        write_split(&root.join("test"), cfg.num_test_images, generate_test_nth)?;
    }
    Ok(())
}

/// A triplet with ground-truth nucleus counts (by centroid) of the positive
/// region and of the negative sub-region, both in source coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub triplet: Triplet,
    pub positive_count: usize,
    pub negative_count: usize,
}

/// `n` triplets, each from its own freshly generated image.
pub fn generate_triplet_pool(cfg: &SynthConfig, sampler: &SamplerConfig, n: usize) -> Result<Vec<PoolEntry>> {
    (0..n)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[TAG_POOL, i as u64]);
            let (image, labels) = generate(&cfg.with_seed(seed))?;
            let triplet = sample_triplet(&image, derive_seed(seed, &[1]), sampler)?;
            let centroids = InstanceCentroids::from_labels(&labels);
            let (_, positive_count) = centroids.stats_in(&triplet.spec.positive);
            let (_, negative_count) = centroids.stats_in(&triplet.spec.negative_in_source());
            Ok(PoolEntry {
                triplet,
                positive_count,
                negative_count,
            })
        })
        .collect()
}
