use crate::dataio::InstanceLabelMap;
use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const BODY: u8 = 1;
pub const BOUNDARY: u8 = 2;

/// Per-pixel class map over {background, nucleus body, nucleus boundary}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMask {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl TernaryMask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "ternary mask of {height}x{width} needs {} values, got {}",
                height * width,
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c > BOUNDARY) {
            return Err(Error::Shape(format!("ternary mask value {bad} is not in {{0, 1, 2}}")));
        }
        Ok(Self { height, width, classes })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            classes: vec![BACKGROUND; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        assert!(class <= BOUNDARY, "class {class} is not ternary");
        self.classes[y * self.width + x] = class;
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

/// Splits every instance into boundary pixels (within Chebyshev distance
/// `boundary_width` of an in-bounds pixel carrying a different label,
/// background included) and body pixels (the rest).
pub fn instance_to_ternary(labels: &InstanceLabelMap, boundary_width: usize) -> TernaryMask {
    let (h, w) = (labels.height(), labels.width());
    let r = boundary_width;
    let mut classes = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let id = labels.get(y, x);
            if id == 0 {
                continue;
            }
            let near_other = (y.saturating_sub(r)..(y + r + 1).min(h))
                .any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| labels.get(yy, xx) != id));
            classes[y * w + x] = if near_other { BOUNDARY } else { BODY };
        }
    }
    TernaryMask {
        height: h,
        width: w,
        classes,
    }
}
