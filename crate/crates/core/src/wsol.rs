//! Weakly supervised localization: activation map → threshold → largest
//! 4-connected component → square box → foreground/background split.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::data::{BBox, Image, CHANNELS};
use crate::error::{Error, Result};

/// How channel activations are reduced to one heatmap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    /// ReLU of the mean over channels.
    #[default]
    ChannelMean,
    /// ReLU of the cosine between each location's feature vector and the
    /// image's class prototype.
    PrototypeCosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub side: usize,
    /// `side × side`, bilinearly upsampled from `values`.
    pub upsampled: Vec<f64>,
}

impl ActivationMap {
    fn from_values(height: usize, width: usize, values: Vec<f64>, side: usize) -> Self {
        let upsampled = bilinear_upsample(&values, height, width, side);
        Self {
            height,
            width,
            values,
            side,
            upsampled,
        }
    }
}

/// Bilinear resize of an `h × w` grid to `side × side` (half-pixel centers,
/// edge clamped).
pub fn bilinear_upsample(values: &[f64], h: usize, w: usize, side: usize) -> Vec<f64> {
    let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        let (y0, y1, ty) = sample((y as f64 + 0.5) * h as f64 / side as f64 - 0.5, h);
        for x in 0..side {
            let (x0, x1, tx) = sample((x as f64 + 0.5) * w as f64 / side as f64 - 0.5, w);
            let top = values[y0 * w + x0] * (1.0 - tx) + values[y0 * w + x1] * tx;
            let bot = values[y1 * w + x0] * (1.0 - tx) + values[y1 * w + x1] * tx;
            out[y * side + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Class-agnostic CAM: `ReLU(mean_d map[d, y, x])`, upsampled to `side`.
pub fn cam(map: &FeatureMap, side: usize) -> ActivationMap {
    let (d, h, w) = (map.channels(), map.height(), map.width());
    let mut values = vec![0.0; h * w];
    for c in 0..d {
        for (v, m) in values.iter_mut().zip(map.values.item(c)) {
            *v += m;
        }
    }
    values
        .iter_mut()
        .for_each(|v| *v = (*v / d as f64).max(0.0));
    ActivationMap::from_values(h, w, values, side)
}

/// Prototype-weighted CAM: `ReLU(cos(map[:, y, x], prototype))`.
pub fn cam_prototype(map: &FeatureMap, prototype: &[f64], side: usize) -> Result<ActivationMap> {
    let (d, h, w) = (map.channels(), map.height(), map.width());
    if prototype.len() != d {
        return Err(Error::Shape(format!(
            "prototype dim {} vs {d} channels",
            prototype.len()
        )));
    }
    let pn = prototype.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut dot, mut nn) = (0.0, 0.0);
            for (c, p) in prototype.iter().enumerate() {
                let v = map.at(c, y, x);
                dot += v * p;
                nn += v * v;
            }
            let denom = nn.sqrt() * pn;
            values[y * w + x] = if denom > 0.0 {
                (dot / denom).max(0.0)
            } else {
                0.0
            };
        }
    }
    Ok(ActivationMap::from_values(h, w, values, side))
}

/// Binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

pub const DEFAULT_TAU: f64 = 0.2;

/// `upsampled[p] ≥ min + τ · (max − min)`, i.e. τ of the min-max normalized
/// map. An all-zero map yields an empty mask.
pub fn auto_threshold(act: &ActivationMap, tau: f64) -> Mask {
    let max = act.upsampled.iter().cloned().fold(0.0, f64::max);
    let min = act.upsampled.iter().cloned().fold(max, f64::min);
    let bits = if max > 0.0 {
        let cut = min + tau * (max - min);
        act.upsampled.iter().map(|&v| v >= cut).collect()
    } else {
        vec![false; act.upsampled.len()]
    };
    Mask::new(act.side, act.side, bits)
}

/// Square region of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl ObjectBox {
    pub fn to_bbox(&self) -> BBox {
        BBox {
            top: self.top,
            left: self.left,
            height: self.side,
            width: self.side,
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.side >= 1 && self.top + self.side <= height && self.left + self.side <= width
    }
}

/// Pixels (raster indices) and tight box of the largest 4-connected component.
/// Ties go to the component whose first pixel comes first in raster order.
pub fn largest_component(mask: &Mask) -> Option<(Vec<usize>, BBox)> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut best: Option<Vec<usize>> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.bits[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if best.as_ref().is_none_or(|b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    best.map(|mut comp| {
        comp.sort_unstable();
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &comp {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y + 1);
            x1 = x1.max(x + 1);
        }
        let bb = BBox {
            top: y0,
            left: x0,
            height: y1 - y0,
            width: x1 - x0,
        };
        (comp, bb)
    })
}

/// Expands a tight box to a square of side `max(h, w)` centered on it, then
/// shifts it to lie inside a `height × width` image.
pub fn square_box(tight: &BBox, height: usize, width: usize) -> ObjectBox {
    let side = tight.height.max(tight.width).min(height).min(width).max(1);
    let center = |start: usize, len: usize, limit: usize| -> usize {
        let s = start as isize - (side as isize - len as isize) / 2;
        s.clamp(0, (limit - side) as isize) as usize
    };
    ObjectBox {
        top: center(tight.top, tight.height, height),
        left: center(tight.left, tight.width, width),
        side,
    }
}

/// Square box around the largest component of a non-empty mask.
pub fn largest_component_box(mask: &Mask) -> Result<ObjectBox> {
    let (_, tight) = largest_component(mask).ok_or(Error::EmptyMask)?;
    Ok(square_box(&tight, mask.height, mask.width))
}

/// Centered square of side `⌈0.6 · side⌉`, used when the mask is empty.
pub fn fallback_box(side: usize) -> ObjectBox {
    let s = ((side as f64) * 0.6).ceil() as usize;
    let s = s.clamp(1, side);
    ObjectBox {
        top: (side - s) / 2,
        left: (side - s) / 2,
        side: s,
    }
}

/// Square RGB patch, height × width × channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub pixels: Vec<f32>,
}

impl Patch {
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.side + x) * CHANNELS + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FgBgPair {
    pub foreground: Patch,
    /// Original image with the box region zeroed, held for replacement.
    pub background: Image,
    pub bbox: ObjectBox,
}

/// Cuts `bbox` (or the fallback box) out of `image`.
pub fn split_fg_bg(image: &Image, bbox: Option<ObjectBox>) -> FgBgPair {
    let side = image.side();
    let b = bbox
        .filter(|b| b.fits(side, side))
        .unwrap_or_else(|| fallback_box(side));
    let mut fg = Vec::with_capacity(b.side * b.side * CHANNELS);
    let mut background = image.clone();
    for y in b.top..b.top + b.side {
        for x in b.left..b.left + b.side {
            for c in 0..CHANNELS {
                fg.push(image.get(y, x, c));
                background.set(y, x, c, 0.0);
            }
        }
    }
    FgBgPair {
        foreground: Patch {
            side: b.side,
            pixels: fg,
        },
        background,
        bbox: b,
    }
}

/// Pastes `patch` (whose side must equal `bbox.side`) into `background`.
pub fn paste(background: &Image, patch: &Patch, bbox: &ObjectBox) -> Result<Image> {
    if patch.side != bbox.side {
        return Err(Error::Shape(format!(
            "patch side {} vs box side {}",
            patch.side, bbox.side
        )));
    }
    let mut out = background.clone();
    for y in 0..bbox.side {
        for x in 0..bbox.side {
            for c in 0..CHANNELS {
                out.set(bbox.top + y, bbox.left + x, c, patch.get(y, x, c));
            }
        }
    }
    Ok(out)
}

pub fn recompose(pair: &FgBgPair) -> Image {
    paste(&pair.background, &pair.foreground, &pair.bbox).expect("pair sides agree")
}

/// Localization result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub activation: ActivationMap,
    pub mask: Mask,
    /// `None` when the mask was empty and the fallback box was used.
    pub detected: Option<ObjectBox>,
    pub bbox: ObjectBox,
}

/// Full pipeline on one feature map.
pub fn localize(
    map: &FeatureMap,
    side: usize,
    tau: f64,
    prototype: Option<&[f64]>,
) -> Result<Localization> {
    let activation = match prototype {
        Some(p) => cam_prototype(map, p, side)?,
        None => cam(map, side),
    };
    let mask = auto_threshold(&activation, tau);
    let detected = largest_component_box(&mask).ok();
    let bbox = detected.unwrap_or_else(|| fallback_box(side));
    Ok(Localization {
        activation,
        mask,
        detected,
        bbox,
    })
}
