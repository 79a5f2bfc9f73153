use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// An 8-bit RGB raster stored row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        assert!(height > 0 && width > 0, "image must be non-empty");
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies out a `height`x`width` window with its top-left corner at (y, x).
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || y + height > self.height || x + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({y},{x}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

/// Per-pixel instance ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("label map must be non-empty, got {height}x{width}")));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} labels for a {height}x{width} map, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "label map must be non-empty");
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u32) {
        self.labels[y * self.width + x] = id;
    }

    /// The nonzero ids present; each has at least one pixel by construction.
    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().filter(|&id| id != 0).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids().len()
    }

    pub fn max_id(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || y + height > self.height || x + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({y},{x}) exceeds {}x{} label map",
                self.height, self.width
            )));
        }
        let mut labels = Vec::with_capacity(height * width);
        for row in y..y + height {
            let start = row * self.width + x;
            labels.extend_from_slice(&self.labels[start..start + width]);
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Renumbers ids to 1..=n in order of first appearance in raster scan.
    pub fn relabel_sequential(&self) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut next = 0u32;
        let labels = self
            .labels
            .iter()
            .map(|&id| {
                if id == 0 {
                    0
                } else {
                    *remap.entry(id).or_insert_with(|| {
                        next += 1;
                        next
                    })
                }
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}
