//! Image samples, instance annotations and everything that produces them:
//! COCO-format ingestion, the RLE mask codec, the synthetic two-domain
//! generator, few-shot splits, the alternating-training plan, the texture
//! probe and the two-view augmentation used by contrastive training.

pub mod augment;
pub mod coco;
pub mod glcm;
pub mod plan;
pub mod rle;
pub mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{two_views, AugmentConfig, View};
pub use coco::{load_coco_dataset, write_coco_dataset, CocoDataset};
pub use glcm::{glcm_features, GlcmFeatures};
pub use plan::{build_amt2_plan, Amt2Plan, PlanIteration};
pub use rle::{rle_decode, rle_encode, Rle};
pub use split::{make_few_shot_split, FewShotSplit};
pub use synth::{synth_dataset, Domain, SynthConfig};

/// Axis-aligned box in pixel units, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Half-open containment test, `x <= px < x + w`.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        BBox::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Binary mask stored row-major, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| u8::from(v != 0))).collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight bounding box of the set pixels, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| {
            BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub category: u32,
    pub bbox: BBox,
    pub mask: Mask,
}

impl InstanceAnnotation {
    /// Builds an annotation whose box is the tight box of `mask`.
    pub fn from_mask(category: u32, mask: Mask) -> Result<Self> {
        let bbox = mask
            .tight_box()
            .ok_or_else(|| Error::arg("instance mask is empty"))?;
        Ok(Self { category, bbox, mask })
    }
}

/// One image plus its (possibly empty) instance annotations. Pixels are
/// stored plane-major with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub annotations: Vec<InstanceAnnotation>,
}

impl ImageSample {
    pub fn new_gray(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("image must have positive height and width"));
        }
        if pixels.len() != height * width {
            return Err(Error::arg(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            channels: 1,
            pixels,
            annotations: Vec::new(),
        })
    }

    /// Luminance plane as the mean of all channels.
    pub fn gray(&self) -> Vec<f64> {
        let n = self.height * self.width;
        if self.channels == 1 {
            return self.pixels.iter().map(|&v| f64::from(v)).collect();
        }
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(&self.pixels[c * n..(c + 1) * n]) {
                *o += f64::from(v);
            }
        }
        let k = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }

    /// Checks the structural invariants of the sample and its annotations.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::arg(format!("image {} has zero size", self.id)));
        }
        if self.pixels.len() != self.channels * self.height * self.width {
            return Err(Error::arg(format!("image {} pixel buffer size mismatch", self.id)));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            if a.mask.height != self.height || a.mask.width != self.width {
                return Err(Error::arg(format!("image {} annotation {i} mask size mismatch", self.id)));
            }
            let b = &a.bbox;
            if b.w <= 0.0 || b.h <= 0.0 || b.x < 0.0 || b.y < 0.0 {
                return Err(Error::arg(format!("image {} annotation {i} has a degenerate box", self.id)));
            }
            if b.right() > self.width as f64 + 1e-9 || b.bottom() > self.height as f64 + 1e-9 {
                return Err(Error::arg(format!("image {} annotation {i} box leaves the image", self.id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_box_of_mask() {
        let m = Mask::from_rows(&[&[0, 0, 0], &[0, 1, 1], &[0, 1, 0]]);
        assert_eq!(m.tight_box(), Some(BBox::new(1.0, 1.0, 2.0, 2.0)));
        assert_eq!(Mask::zeros(2, 2).tight_box(), None);
    }

    #[test]
    fn gray_averages_planes() {
        let mut s = ImageSample::new_gray("a", 1, 2, vec![0.0, 1.0]).unwrap();
        s.channels = 2;
        s.pixels = vec![0.0, 1.0, 1.0, 1.0];
        assert_eq!(s.gray(), vec![0.5, 1.0]);
    }

    #[test]
    fn validate_rejects_box_outside_image() {
        let mut s = ImageSample::new_gray("a", 4, 4, vec![0.0; 16]).unwrap();
        let mut mask = Mask::zeros(4, 4);
        mask.set(3, 3, true);
        s.annotations.push(InstanceAnnotation {
            category: 1,
            bbox: BBox::new(3.0, 3.0, 2.0, 1.0),
            mask,
        });
        assert!(s.validate().is_err());
    }
}
