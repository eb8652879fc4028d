//! Expanded support set: rotated foregrounds, foreground/background exchanges
//! and whole-image rotations, each optionally smoothed by a random convolution.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EpisodeItem, Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::wsol::{paste, FgBgPair, Patch};

/// Rotation classes: quarter turns counter-clockwise.
pub const ROTATIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Original,
    SelfRotation,
    Exchange,
    WholeRotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Support index of the foreground donor.
    pub source: usize,
    /// Support index of the background donor.
    pub background: usize,
    /// Quarter turns applied to the foreground (or whole image).
    pub quarter_turns: usize,
    pub kind: VariantKind,
}

impl Provenance {
    pub fn angle_degrees(&self) -> usize {
        self.quarter_turns * 90
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedSample {
    pub image: Image,
    /// Episode-local class of the foreground donor.
    pub class_label: usize,
    pub rotation_label: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedSupportSet {
    pub way: usize,
    pub samples: Vec<ExpandedSample>,
    /// Sample indices per episode-local class.
    pub by_class: Vec<Vec<usize>>,
}

impl ExpandedSupportSet {
    pub fn new(way: usize, samples: Vec<ExpandedSample>) -> Self {
        let mut by_class = vec![Vec::new(); way];
        for (i, s) in samples.iter().enumerate() {
            by_class[s.class_label].push(i);
        }
        Self {
            way,
            samples,
            by_class,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn originals(&self) -> impl Iterator<Item = &ExpandedSample> {
        self.samples
            .iter()
            .filter(|s| s.provenance.kind == VariantKind::Original)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpandConfig {
    /// Foreground self-rotations per support sample.
    pub g_self: usize,
    /// Foreground exchanges per support sample.
    pub g_exch: usize,
    /// Whole-image rotations per support sample.
    pub whole_rot_count: usize,
    pub wsol_rot: bool,
    pub wsol_exc_rot: bool,
    pub whole_rot: bool,
    /// Probability of random-convolution smoothing per variant.
    pub p_rc: f64,
    /// Standard deviation of the random kernel entries.
    pub rc_sigma: f64,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            g_self: 1,
            g_exch: 3,
            whole_rot_count: 3,
            wsol_rot: true,
            wsol_exc_rot: true,
            whole_rot: false,
            p_rc: 0.5,
            rc_sigma: 0.1,
        }
    }
}

impl ExpandConfig {
    pub fn uses_wsol(&self) -> bool {
        (self.wsol_rot && self.g_self > 0) || (self.wsol_exc_rot && self.g_exch > 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_rc) {
            return Err(Error::Config(format!("p_rc {} outside [0, 1]", self.p_rc)));
        }
        if !(self.rc_sigma >= 0.0 && self.rc_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "rc_sigma {} must be finite and non-negative",
                self.rc_sigma
            )));
        }
        Ok(())
    }
}

/// Rotates a `height × width × C` buffer by `quarter_turns · 90°`
/// counter-clockwise. Only square buffers are accepted.
pub fn rotate_pixels(
    pixels: &[f32],
    height: usize,
    width: usize,
    quarter_turns: usize,
) -> Result<Vec<f32>> {
    if height != width {
        return Err(Error::Shape(format!(
            "cannot rotate a {height}x{width} patch"
        )));
    }
    if pixels.len() != height * width * CHANNELS {
        return Err(Error::Shape(format!(
            "{} values for a {height}x{width} patch",
            pixels.len()
        )));
    }
    let s = height;
    let q = quarter_turns % ROTATIONS;
    if q == 0 {
        return Ok(pixels.to_vec());
    }
    let mut out = vec![0.0; pixels.len()];
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = match q {
                1 => (x, s - 1 - y),
                2 => (s - 1 - y, s - 1 - x),
                _ => (s - 1 - x, y),
            };
            let src = (sy * s + sx) * CHANNELS;
            let dst = (y * s + x) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&pixels[src..src + CHANNELS]);
        }
    }
    Ok(out)
}

pub fn rotate_patch(patch: &Patch, quarter_turns: usize) -> Result<Patch> {
    Ok(Patch {
        side: patch.side,
        pixels: rotate_pixels(&patch.pixels, patch.side, patch.side, quarter_turns)?,
    })
}

pub fn rotate_image(image: &Image, quarter_turns: usize) -> Image {
    let s = image.side();
    let px = rotate_pixels(image.pixels(), s, s, quarter_turns).expect("images are square");
    Image::from_pixels(s, px).expect("rotation preserves range")
}

/// Bilinear resize of a square patch (half-pixel centers, edge clamped).
/// Returns the input unchanged when the side already matches.
pub fn resize_patch(patch: &Patch, target: usize) -> Patch {
    let s = patch.side;
    if s == target {
        return patch.clone();
    }
    let coord = |i: usize| -> (usize, usize, f32) {
        let p = ((i as f32 + 0.5) * s as f32 / target as f32 - 0.5).clamp(0.0, (s - 1) as f32);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(s - 1), p - i0 as f32)
    };
    let mut pixels = Vec::with_capacity(target * target * CHANNELS);
    for y in 0..target {
        let (y0, y1, ty) = coord(y);
        for x in 0..target {
            let (x0, x1, tx) = coord(x);
            for c in 0..CHANNELS {
                let top = patch.get(y0, x0, c) * (1.0 - tx) + patch.get(y0, x1, c) * tx;
                let bot = patch.get(y1, x0, c) * (1.0 - tx) + patch.get(y1, x1, c) * tx;
                pixels.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
            }
        }
    }
    Patch {
        side: target,
        pixels,
    }
}

/// 3×3 kernel with entries `N(1/9, σ²)`, shifted so they sum to one.
pub fn sample_kernel(sigma: f64, rng: &mut StreamRng) -> [f64; 9] {
    let mut k = [1.0 / 9.0; 9];
    if sigma > 0.0 {
        let normal = Normal::new(1.0 / 9.0, sigma).expect("finite sigma");
        for v in k.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    let shift = (k.iter().sum::<f64>() - 1.0) / 9.0;
    k.iter_mut().for_each(|v| *v -= shift);
    k
}

/// Convolves every channel with `kernel` (reflect padding), clipping to `[0, 1]`.
pub fn convolve_image(image: &Image, kernel: &[f64; 9]) -> Image {
    let s = image.side();
    let reflect = |i: isize| -> usize {
        if s == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i as usize >= s {
            2 * (s - 1) - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Image::new(s);
    for y in 0..s {
        for x in 0..s {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = reflect(y as isize + ky as isize - 1);
                        let sx = reflect(x as isize + kx as isize - 1);
                        acc += kernel[ky * 3 + kx] * image.get(sy, sx, c) as f64;
                    }
                }
                out.set(y, x, c, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// With probability `p`, convolves with a fresh random kernel.
pub fn random_conv_smooth(image: &Image, p: f64, sigma: f64, rng: &mut StreamRng) -> Image {
    if p <= 0.0 || !rng.random_bool(p.min(1.0)) {
        return image.clone();
    }
    let k = sample_kernel(sigma, rng);
    convolve_image(image, &k)
}

/// Stitches the rotated foreground of `fg` into the background of `bg`, then
/// smooths. Labels come from the foreground donor.
#[allow(clippy::too_many_arguments)]
pub fn compose(
    fg: &FgBgPair,
    fg_index: usize,
    fg_class: usize,
    bg: &FgBgPair,
    bg_index: usize,
    quarter_turns: usize,
    p_rc: f64,
    rc_sigma: f64,
    rng: &mut StreamRng,
) -> Result<ExpandedSample> {
    let rotated = rotate_patch(&fg.foreground, quarter_turns)?;
    let fitted = resize_patch(&rotated, bg.bbox.side);
    let stitched = paste(&bg.background, &fitted, &bg.bbox)?;
    let image = random_conv_smooth(&stitched, p_rc, rc_sigma, rng);
    let kind = if fg_index == bg_index {
        VariantKind::SelfRotation
    } else {
        VariantKind::Exchange
    };
    Ok(ExpandedSample {
        image,
        class_label: fg_class,
        rotation_label: quarter_turns % ROTATIONS,
        provenance: Provenance {
            source: fg_index,
            background: bg_index,
            quarter_turns: quarter_turns % ROTATIONS,
            kind,
        },
    })
}

/// Builds S′ from the support items and (when WSOL variants are enabled) one
/// foreground/background pair per item.
pub fn build_expanded_set(
    support: &[EpisodeItem],
    way: usize,
    pairs: Option<&[FgBgPair]>,
    config: &ExpandConfig,
    rng: &mut StreamRng,
) -> Result<ExpandedSupportSet> {
    config.validate()?;
    let n = support.len();
    let mut samples = Vec::with_capacity(n * (1 + config.g_self + config.g_exch));
    for (i, item) in support.iter().enumerate() {
        if item.label >= way {
            return Err(Error::Shape(format!(
                "support label {} with way {way}",
                item.label
            )));
        }
        samples.push(ExpandedSample {
            image: item.image.image.clone(),
            class_label: item.label,
            rotation_label: 0,
            provenance: Provenance {
                source: i,
                background: i,
                quarter_turns: 0,
                kind: VariantKind::Original,
            },
        });
    }
    let pairs = if config.uses_wsol() {
        let p = pairs.ok_or_else(|| {
            Error::Config("WSOL variants enabled without localization results".into())
        })?;
        if p.len() != n {
            return Err(Error::Shape(format!(
                "{} localization results for {n} support items",
                p.len()
            )));
        }
        Some(p)
    } else {
        None
    };
    for (i, item) in support.iter().enumerate() {
        if let (true, Some(p)) = (config.wsol_rot, pairs) {
            for _ in 0..config.g_self {
                let q = rng.random_range(1..ROTATIONS);
                samples.push(compose(
                    &p[i],
                    i,
                    item.label,
                    &p[i],
                    i,
                    q,
                    config.p_rc,
                    config.rc_sigma,
                    rng,
                )?);
            }
        }
        if let (true, Some(p), true) = (config.wsol_exc_rot, pairs, n > 1) {
            for _ in 0..config.g_exch {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                let q = rng.random_range(0..ROTATIONS);
                samples.push(compose(
                    &p[i],
                    i,
                    item.label,
                    &p[j],
                    j,
                    q,
                    config.p_rc,
                    config.rc_sigma,
                    rng,
                )?);
            }
        }
        if config.whole_rot && config.whole_rot_count > 0 {
            let offset = rng.random_range(0..ROTATIONS - 1);
            for r in 0..config.whole_rot_count {
                let q = 1 + (offset + r) % (ROTATIONS - 1);
                let rotated = rotate_image(&item.image.image, q);
                samples.push(ExpandedSample {
                    image: random_conv_smooth(&rotated, config.p_rc, config.rc_sigma, rng),
                    class_label: item.label,
                    rotation_label: q,
                    provenance: Provenance {
                        source: i,
                        background: i,
                        quarter_turns: q,
                        kind: VariantKind::WholeRotation,
                    },
                });
            }
        }
    }
    Ok(ExpandedSupportSet::new(way, samples))
}
