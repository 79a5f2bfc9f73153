//! Triplet generation from raw images.
//!
//! An anchor crop is taken at a uniform random offset, the positive is a
//! same-size crop at a nearby but distinct offset, and the negative is a
//! smaller sub-crop of the positive (side drawn from the scale pool) resized
//! back up to the patch size. Nuclei therefore look larger and fewer in the
//! negative than in the positive.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{InstanceLabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Side of the anchor, positive and (resized) negative patches.
    pub patch_size: usize,
    /// Candidate sides for the negative sub-crop.
    pub scale_pool: Vec<usize>,
    /// Minimum Chebyshev distance between anchor and positive offsets.
    pub min_shift: usize,
    /// Maximum Chebyshev distance between anchor and positive offsets.
    pub max_shift: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl SamplerConfig {
    /// 768-pixel patches for 1000x1000 sources.
    pub fn full_scale() -> Self {
        Self {
            patch_size: 768,
            scale_pool: vec![512, 256, 128, 64],
            min_shift: 64,
            max_shift: 232,
        }
    }

    /// The full-scale geometry divided by 12 (magnifications ~1.5, 3, 6, 12).
    pub fn toy() -> Self {
        Self {
            patch_size: 64,
            scale_pool: vec![42, 21, 10, 5],
            min_shift: 5,
            max_shift: 19,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("sampler.patch_size must be positive".into()));
        }
        if self.scale_pool.is_empty() {
            return Err(Error::Config("sampler.scale_pool must not be empty".into()));
        }
        if let Some(&bad) = self.scale_pool.iter().find(|&&s| s == 0 || s >= self.patch_size) {
            return Err(Error::Config(format!(
                "sampler.scale_pool entry {bad} must lie in [1, patch_size)"
            )));
        }
        if self.min_shift == 0 || self.min_shift > self.max_shift {
            return Err(Error::Config(format!(
                "sampler shifts must satisfy 1 <= min_shift <= max_shift, got [{}, {}]",
                self.min_shift, self.max_shift
            )));
        }
        Ok(())
    }
}

/// A square crop with its top-left corner at (x, y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropSpec {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl CropSpec {
    pub fn new(x: usize, y: usize, size: usize) -> Self {
        Self { x, y, size }
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.size > 0 && self.x + self.size <= width && self.y + self.size <= height
    }

    /// Strictly inside `outer` when both are expressed in the same frame.
    pub fn nested_in(&self, outer: &CropSpec) -> bool {
        self.size < outer.size
            && self.x >= outer.x
            && self.y >= outer.y
            && self.x + self.size <= outer.x + outer.size
            && self.y + self.size <= outer.y + outer.size
    }

    /// Chebyshev distance between the top-left corners.
    pub fn shift_from(&self, other: &CropSpec) -> usize {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }
}

/// Crop geometry of one triplet, without pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub anchor: CropSpec,
    pub positive: CropSpec,
    /// In positive-patch coordinates.
    pub negative: CropSpec,
    pub negative_scale: usize,
}

impl TripletSpec {
    /// The negative region expressed in source-image coordinates.
    pub fn negative_in_source(&self) -> CropSpec {
        CropSpec::new(self.positive.x + self.negative.x, self.positive.y + self.negative.y, self.negative.size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: RgbImage,
    pub positive: RgbImage,
    pub negative: RgbImage,
    pub spec: TripletSpec,
    pub seed: u64,
}

/// Number of offsets `(x, y)` in `[xlo, xhi] x [ylo, yhi]` whose Chebyshev
/// distance from `(ax, ay)` is at least `min`, on row `y`.
fn row_count(y: usize, xlo: usize, xhi: usize, ax: usize, ay: usize, min: usize) -> usize {
    let full = xhi - xlo + 1;
    if y.abs_diff(ay) >= min {
        return full;
    }
    // Excluded band |x - ax| < min, clipped to the row.
    let band_lo = (ax + 1).saturating_sub(min).max(xlo);
    let band_hi = (ax + min - 1).min(xhi);
    if band_lo > band_hi {
        full
    } else {
        full - (band_hi - band_lo + 1)
    }
}

fn nth_in_row(y: usize, xlo: usize, xhi: usize, ax: usize, ay: usize, min: usize, mut k: usize) -> usize {
    for x in xlo..=xhi {
        if x.abs_diff(ax).max(y.abs_diff(ay)) >= min {
            if k == 0 {
                return x;
            }
            k -= 1;
        }
    }
    unreachable!("row count and enumeration disagree")
}

/// Draws triplet geometry for a `height`x`width` source. Deterministic in `seed`.
pub fn sample_triplet_spec(height: usize, width: usize, seed: u64, cfg: &SamplerConfig) -> Result<TripletSpec> {
    cfg.validate()?;
    let p = cfg.patch_size;
    if height < p || width < p {
        return Err(Error::ImageTooSmall {
            height,
            width,
            required: p,
        });
    }
    let mut rng = rng_for(seed, &[0x7219]);
    let max_x = width - p;
    let max_y = height - p;
    let ax = rng.gen_range(0..=max_x);
    let ay = rng.gen_range(0..=max_y);

    // Positive: uniform over valid offsets with shift in [min_shift, max_shift].
    let xlo = ax.saturating_sub(cfg.max_shift);
    let xhi = (ax + cfg.max_shift).min(max_x);
    let ylo = ay.saturating_sub(cfg.max_shift);
    let yhi = (ay + cfg.max_shift).min(max_y);
    let counts: Vec<usize> = (ylo..=yhi)
        .map(|y| row_count(y, xlo, xhi, ax, ay, cfg.min_shift))
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::ImageTooSmall {
            height,
            width,
            required: p + cfg.min_shift,
        });
    }
    let mut k = rng.gen_range(0..total);
    let mut positive = None;
    for (row, &c) in counts.iter().enumerate() {
        if k < c {
            let y = ylo + row;
            positive = Some(CropSpec::new(nth_in_row(y, xlo, xhi, ax, ay, cfg.min_shift, k), y, p));
            break;
        }
        k -= c;
    }
    let positive = positive.expect("k < total");

    let scale = cfg.scale_pool[rng.gen_range(0..cfg.scale_pool.len())];
    let nx = rng.gen_range(0..=p - scale);
    let ny = rng.gen_range(0..=p - scale);
    Ok(TripletSpec {
        anchor: CropSpec::new(ax, ay, p),
        positive,
        negative: CropSpec::new(nx, ny, scale),
        negative_scale: scale,
    })
}

/// Materializes a triplet from `image`. Deterministic in `(image, seed, cfg)`.
pub fn sample_triplet(image: &RgbImage, seed: u64, cfg: &SamplerConfig) -> Result<Triplet> {
    let spec = sample_triplet_spec(image.height(), image.width(), seed, cfg)?;
    let p = cfg.patch_size;
    let anchor = image.crop(spec.anchor.y, spec.anchor.x, p, p)?;
    let positive = image.crop(spec.positive.y, spec.positive.x, p, p)?;
    let sub = positive.crop(spec.negative.y, spec.negative.x, spec.negative.size, spec.negative.size)?;
    let negative = resize_bilinear(&sub, p);
    Ok(Triplet {
        anchor,
        positive,
        negative,
        spec,
        seed,
    })
}

/// Bilinear resize to `target`x`target`.
///
/// Coordinate convention: pixel centres sit at half-integers, so output
/// index `o` samples source coordinate `(o + 0.5) * in / out - 0.5`, clamped
/// to `[0, in - 1]`. The interpolated value is rounded to the nearest
/// integer (ties away from zero).
pub fn resize_bilinear(patch: &RgbImage, target: usize) -> RgbImage {
    assert!(target >= 1, "resize target must be positive");
    let (h, w) = (patch.height(), patch.width());
    let axis = |o: usize, n_in: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / target as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..target).map(|o| axis(o, w)).collect();
    let ys: Vec<_> = (0..target).map(|o| axis(o, h)).collect();
    let mut out = vec![0u8; target * target * 3];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = patch.get(y0, x0, c) as f64 * (1.0 - fx) + patch.get(y0, x1, c) as f64 * fx;
                let bottom = patch.get(y1, x0, c) as f64 * (1.0 - fx) + patch.get(y1, x1, c) as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(oy * target + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(target, target, out).expect("buffer sized for target")
}

/// Per-instance area and centroid, computed once per label map.
#[derive(Debug, Clone)]
pub struct InstanceCentroids {
    /// id -> (area, centroid y, centroid x); centroids in continuous pixel
    /// coordinates where pixel (r, c) covers [r, r+1) x [c, c+1).
    instances: BTreeMap<u32, (usize, f64, f64)>,
}

impl InstanceCentroids {
    pub fn from_labels(labels: &InstanceLabelMap) -> Self {
        let mut acc: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
        for y in 0..labels.height() {
            for x in 0..labels.width() {
                let id = labels.get(y, x);
                if id != 0 {
                    let e = acc.entry(id).or_insert((0, 0.0, 0.0));
                    e.0 += 1;
                    e.1 += y as f64 + 0.5;
                    e.2 += x as f64 + 0.5;
                }
            }
        }
        for v in acc.values_mut() {
            v.1 /= v.0 as f64;
            v.2 /= v.0 as f64;
        }
        Self { instances: acc }
    }

    /// `(mean area, count)` over instances whose centroid lies in `region`.
    pub fn stats_in(&self, region: &CropSpec) -> (f64, usize) {
        let (y0, x0) = (region.y as f64, region.x as f64);
        let (y1, x1) = (y0 + region.size as f64, x0 + region.size as f64);
        let (total, count) = self
            .instances
            .values()
            .filter(|(_, cy, cx)| *cy >= y0 && *cy < y1 && *cx >= x0 && *cx < x1)
            .fold((0usize, 0usize), |(t, n), (area, _, _)| (t + area, n + 1));
        let mean = if count == 0 { 0.0 } else { total as f64 / count as f64 };
        (mean, count)
    }
}

/// Mean nucleus area and nucleus count for `region`, counting an instance
/// when its centroid falls inside the region. Areas are whole-instance areas.
pub fn nuclei_stats(labels: &InstanceLabelMap, region: &CropSpec) -> Result<(f64, usize)> {
    if !region.fits_in(labels.height(), labels.width()) {
        return Err(Error::Shape(format!(
            "region {region:?} is outside the {}x{} label map",
            labels.height(),
            labels.width()
        )));
    }
    Ok(InstanceCentroids::from_labels(labels).stats_in(region))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_triplet_has_three_768_patches() {
        let img = RgbImage::filled(1000, 1000, [10, 20, 30]);
        let t = sample_triplet(&img, 5, &SamplerConfig::full_scale()).unwrap();
        for p in [&t.anchor, &t.positive, &t.negative] {
            assert_eq!((p.height(), p.width()), (768, 768));
        }
        assert!(t.spec.negative.fits_in(768, 768));
        assert_ne!(t.spec.anchor, t.spec.positive);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let cfg = SamplerConfig::full_scale();
        assert!(matches!(
            sample_triplet_spec(767, 1000, 0, &cfg),
            Err(Error::ImageTooSmall { height: 767, .. })
        ));
        // Fits a crop but leaves no room for a shifted positive.
        assert!(matches!(
            sample_triplet_spec(768, 768, 0, &cfg),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn positive_shift_stays_in_range() {
        let cfg = SamplerConfig::full_scale();
        for seed in 0..500 {
            let s = sample_triplet_spec(1000, 1000, seed, &cfg).unwrap();
            let d = s.positive.shift_from(&s.anchor);
            assert!((64..=232).contains(&d), "seed {seed}: shift {d}");
            assert!(s.positive.fits_in(1000, 1000));
        }
    }

    #[test]
    fn row_counts_match_enumeration() {
        for (ax, ay, min) in [(0, 0, 3), (5, 7, 2), (10, 10, 11), (3, 9, 1)] {
            let (xlo, xhi) = (0, 12);
            for y in 0..=14usize {
                let brute = (xlo..=xhi).filter(|&x: &usize| x.abs_diff(ax).max(y.abs_diff(ay)) >= min).count();
                assert_eq!(row_count(y, xlo, xhi, ax, ay, min), brute);
            }
        }
    }

    #[test]
    fn invalid_pool_is_rejected() {
        let mut cfg = SamplerConfig::toy();
        cfg.scale_pool = vec![64];
        assert!(cfg.validate().is_err());
        cfg.scale_pool = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn constant_patch_resizes_to_constant() {
        let img = RgbImage::filled(256, 256, [100, 100, 100]);
        let out = resize_bilinear(&img, 768);
        assert_eq!((out.height(), out.width()), (768, 768));
        assert!(out.pixels().iter().all(|&v| v == 100));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let px: Vec<u8> = (0..7 * 7 * 3).map(|v| (v * 37 % 256) as u8).collect();
        let img = RgbImage::new(7, 7, px).unwrap();
        assert_eq!(resize_bilinear(&img, 7), img);
    }

    #[test]
    fn stats_count_centroids_inside() {
        // Two 2x2 instances inside [0,4)x[0,4), one outside.
        let mut m = InstanceLabelMap::background(8, 8);
        for (id, (y, x)) in [(1, (0, 0)), (2, (2, 2)), (3, (5, 5))] {
            for dy in 0..2 {
                for dx in 0..2 {
                    m.set(y + dy, x + dx, id);
                }
            }
        }
        assert_eq!(nuclei_stats(&m, &CropSpec::new(0, 0, 4)).unwrap(), (4.0, 2));
        assert_eq!(nuclei_stats(&m, &CropSpec::new(0, 4, 3)).unwrap(), (0.0, 0));
        assert_eq!(nuclei_stats(&m, &CropSpec::new(0, 0, 8)).unwrap().1, 3);
        assert!(nuclei_stats(&m, &CropSpec::new(5, 5, 4)).is_err());
    }
}
