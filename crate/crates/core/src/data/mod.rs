//! Images, domains and episodic sampling.

mod episode;
mod folder;
pub mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use episode::{sample_episode, Episode, EpisodeItem};
pub use folder::{export_collection, load_domain};
pub use synth::{generate_synthetic_domain, ShapeKind, TextureFamily};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel units; `top + height` and `left + width` are exclusive bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let h = self
            .bottom()
            .min(other.bottom())
            .saturating_sub(self.top.max(other.top));
        let w = self
            .right()
            .min(other.right())
            .saturating_sub(self.left.max(other.left));
        h * w
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Square RGB image stored height × width × channel, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            pixels: vec![0.0; side * side * CHANNELS],
        }
    }

    pub fn filled(side: usize, value: f32) -> Self {
        Self {
            side,
            pixels: vec![value; side * side * CHANNELS],
        }
    }

    pub fn from_pixels(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side * CHANNELS {
            return Err(Error::Shape(format!(
                "{} pixel values for a {side}x{side}x{CHANNELS} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("pixel value outside [0, 1]".into()));
        }
        Ok(Self { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.side + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.side + x) * CHANNELS + c] = v;
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.side + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-major copy (C × H × W) for the encoder.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.side * self.side;
        let mut out = vec![0.0; CHANNELS * hw];
        for (p, px) in self.pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * hw + p] = px[c] as f64;
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let side = self.side as u32;
        image::RgbImage::from_fn(side, side, |x, y| {
            let [r, g, b] = self.rgb(y as usize, x as usize);
            image::Rgb([to_u8(r), to_u8(g), to_u8(b)])
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub class_id: usize,
    pub gt_box: Option<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainSource {
    Directory(PathBuf),
    Synthetic {
        seed: u64,
        family: TextureFamily,
        images_per_class: usize,
    },
}

/// Where a domain's images come from and which class split to read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub source: DomainSource,
    pub split: Split,
    /// Explicit class list; `None` selects the default partition for `split`.
    pub classes: Option<Vec<String>>,
    pub side: usize,
    /// Classes with fewer images are dropped at load time.
    pub min_images: usize,
}

impl DomainSpec {
    pub fn synthetic(
        family: TextureFamily,
        seed: u64,
        images_per_class: usize,
        split: Split,
        side: usize,
    ) -> Self {
        Self {
            name: format!("synth{}", family.letter()),
            source: DomainSource::Synthetic {
                seed,
                family,
                images_per_class,
            },
            split,
            classes: None,
            side,
            min_images: 1,
        }
    }
}

/// Default class partition over a sorted list of `n` class names:
/// 64 % train, 16 % val, 20 % test (rounded, each split non-empty when n ≥ 3).
pub fn default_partition(n: usize, split: Split) -> std::ops::Range<usize> {
    let val = ((n as f64) * 0.16).round().max(1.0) as usize;
    let test = ((n as f64) * 0.20).round().max(1.0) as usize;
    let train = n.saturating_sub(val + test);
    match split {
        Split::Train => 0..train,
        Split::Val => train..train + val,
        Split::Test => train + val..n,
    }
}

#[derive(Clone, Debug)]
pub struct ClassGroup {
    pub class_id: usize,
    pub name: String,
    pub images: Vec<LabeledImage>,
}

/// Images grouped by class; immutable after loading.
#[derive(Clone, Debug)]
pub struct Collection {
    pub name: String,
    pub side: usize,
    pub classes: Vec<ClassGroup>,
    /// Names of classes dropped for having too few images.
    pub excluded: Vec<String>,
}

impl Collection {
    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn images(&self) -> impl Iterator<Item = &LabeledImage> {
        self.classes.iter().flat_map(|c| c.images.iter())
    }
}
