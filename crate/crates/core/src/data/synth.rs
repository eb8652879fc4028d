//! Procedural shapes-on-texture domains with ground-truth object boxes.
//!
//! A class is a shape; a domain is a texture family. Shape geometry is drawn
//! from a stream keyed by `(seed, class, index)` only, so two families with
//! the same seed place identical shapes over different backgrounds.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, ClassGroup, Collection, Image, LabeledImage, Split, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{stream, tags};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextureFamily {
    /// Smooth blotchy value noise in greens and browns.
    A,
    /// Oriented sinusoidal stripes in blue-greys.
    B,
    /// Soft checkerboard in warm tones.
    C,
}

impl TextureFamily {
    pub fn letter(&self) -> char {
        match self {
            TextureFamily::A => 'A',
            TextureFamily::B => 'B',
            TextureFamily::C => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(TextureFamily::A),
            'B' => Some(TextureFamily::B),
            'C' => Some(TextureFamily::C),
            _ => None,
        }
    }

    fn id(&self) -> u64 {
        *self as u64
    }
}

/// Shape catalog. No class is a 90° rotation of another, so rotating a
/// foreground never turns it into a different class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Ring,
    Square,
    HollowSquare,
    Triangle,
    Plus,
    XCross,
    Bar,
    Diamond,
    HollowDiamond,
    LShape,
    TShape,
    Crescent,
    Star,
    Hexagon,
    Arrow,
    HalfDisk,
    Target,
    Hourglass,
    Heart,
    DotPair,
    Ellipse,
    HollowTriangle,
    Chevron,
}

pub const CATALOG: [ShapeKind; 24] = [
    ShapeKind::Disk,
    ShapeKind::Ring,
    ShapeKind::Square,
    ShapeKind::HollowSquare,
    ShapeKind::Triangle,
    ShapeKind::Plus,
    ShapeKind::XCross,
    ShapeKind::Bar,
    ShapeKind::Diamond,
    ShapeKind::HollowDiamond,
    ShapeKind::LShape,
    ShapeKind::TShape,
    ShapeKind::Crescent,
    ShapeKind::Star,
    ShapeKind::Hexagon,
    ShapeKind::Arrow,
    ShapeKind::HalfDisk,
    ShapeKind::Target,
    ShapeKind::Hourglass,
    ShapeKind::Heart,
    ShapeKind::DotPair,
    ShapeKind::Ellipse,
    ShapeKind::HollowTriangle,
    ShapeKind::Chevron,
];

/// Class ids of the synthetic catalog belonging to each split (12 / 5 / 7).
pub fn split_classes(split: Split) -> std::ops::Range<usize> {
    match split {
        Split::Train => 0..12,
        Split::Val => 12..17,
        Split::Test => 17..24,
    }
}

impl ShapeKind {
    pub fn name(&self) -> String {
        format!("{self:?}").to_lowercase()
    }

    /// Indicator of the shape on the canonical square `[-1, 1]²`, `v` pointing down.
    fn contains(&self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        let (au, av) = (u.abs(), v.abs());
        let tri = |u: f64, v: f64, h: f64| {
            let t = (v + h) / (2.0 * h);
            (0.0..=1.0).contains(&t) && u.abs() <= h * t
        };
        match self {
            ShapeKind::Disk => r2 <= 0.9 * 0.9,
            ShapeKind::Ring => (0.55 * 0.55..=0.92 * 0.92).contains(&r2),
            ShapeKind::Square => au <= 0.85 && av <= 0.85,
            ShapeKind::HollowSquare => (0.5..=0.88).contains(&au.max(av)),
            ShapeKind::Triangle => tri(u, v, 0.92),
            ShapeKind::Plus => (au <= 0.3 && av <= 0.92) || (av <= 0.3 && au <= 0.92),
            ShapeKind::XCross => {
                let a = (u + v) / 2f64.sqrt();
                let b = (u - v) / 2f64.sqrt();
                au <= 0.9 && av <= 0.9 && ((a.abs() <= 0.25) || (b.abs() <= 0.25))
            }
            ShapeKind::Bar => au <= 0.95 && av <= 0.42,
            ShapeKind::Diamond => au + av <= 0.95,
            ShapeKind::HollowDiamond => (0.5..=0.95).contains(&(au + av)),
            ShapeKind::LShape => {
                ((-0.8..=-0.3).contains(&u) && (-0.9..=0.9).contains(&v))
                    || ((0.4..=0.9).contains(&v) && (-0.8..=0.8).contains(&u))
            }
            ShapeKind::TShape => {
                ((-0.9..=-0.45).contains(&v) && au <= 0.9) || (au <= 0.25 && av <= 0.9)
            }
            ShapeKind::Crescent => r2 <= 0.9 * 0.9 && (u - 0.42).powi(2) + v * v > 0.68 * 0.68,
            ShapeKind::Star => {
                let theta = v.atan2(u) + PI / 2.0;
                r2.sqrt() <= 0.55 + 0.4 * (5.0 * theta).cos()
            }
            ShapeKind::Hexagon => av <= 0.82 && 0.866 * au + 0.5 * av <= 0.82,
            ShapeKind::Arrow => {
                (av <= 0.22 && (-0.9..=0.1).contains(&u))
                    || ((0.1..=0.9).contains(&u) && av <= 0.9 - u)
            }
            ShapeKind::HalfDisk => u * u + (v - 0.45).powi(2) <= 0.9 * 0.9 && v <= 0.45,
            ShapeKind::Target => r2 <= 0.28 * 0.28 || (0.55 * 0.55..=0.9 * 0.9).contains(&r2),
            ShapeKind::Hourglass => au <= av && av <= 0.9,
            ShapeKind::Heart => {
                let x = u * 1.25;
                let y = -v * 1.25 + 0.25;
                (x * x + y * y - 1.0).powi(3) - x * x * y.powi(3) <= 0.0
            }
            ShapeKind::DotPair => {
                (u + 0.45).powi(2) + (v + 0.45).powi(2) <= 0.42 * 0.42
                    || (u - 0.45).powi(2) + (v - 0.45).powi(2) <= 0.42 * 0.42
            }
            ShapeKind::Ellipse => (u / 0.95).powi(2) + (v / 0.5).powi(2) <= 1.0,
            ShapeKind::HollowTriangle => {
                // inner triangle scaled by 0.45 about the centroid
                let c = 0.92 / 3.0;
                tri(u, v, 0.92) && !tri(u / 0.45, (v - c) / 0.45 + c, 0.92)
            }
            ShapeKind::Chevron => au <= 0.9 && (v - (0.9 * au - 0.45)).abs() <= 0.24,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Background texture of one image, as `side × side` RGB values.
fn draw_background<R: Rng>(family: TextureFamily, side: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; side * side];
    let jitter = |rng: &mut R, c: [f64; 3], amt: f64| -> [f64; 3] {
        [
            c[0] + rng.random_range(-amt..amt),
            c[1] + rng.random_range(-amt..amt),
            c[2] + rng.random_range(-amt..amt),
        ]
    };
    match family {
        TextureFamily::A => {
            let c0 = jitter(rng, [0.30, 0.42, 0.22], 0.06);
            let c1 = jitter(rng, [0.48, 0.38, 0.26], 0.06);
            let g = 6;
            let grid: Vec<f64> = (0..(g + 1) * (g + 1))
                .map(|_| rng.random::<f64>())
                .collect();
            for y in 0..side {
                for x in 0..side {
                    let fy = y as f64 / side as f64 * g as f64;
                    let fx = x as f64 / side as f64 * g as f64;
                    let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                    let at = |a: usize, b: usize| grid[a * (g + 1) + b];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    out[y * side + x] = lerp3(c0, c1, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        TextureFamily::B => {
            let c0 = jitter(rng, [0.35, 0.42, 0.52], 0.05);
            let c1 = jitter(rng, [0.55, 0.60, 0.66], 0.05);
            let angle = rng.random_range(0.0..PI);
            let period = rng.random_range(8.0..16.0) * side as f64 / 48.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..side {
                for x in 0..side {
                    let t = (x as f64 * ca + y as f64 * sa) / period * 2.0 * PI + phase;
                    out[y * side + x] = lerp3(c0, c1, 0.5 + 0.25 * t.sin());
                }
            }
        }
        TextureFamily::C => {
            let c0 = jitter(rng, [0.62, 0.45, 0.35], 0.05);
            let c1 = jitter(rng, [0.75, 0.62, 0.48], 0.05);
            let cell = rng.random_range(8.0..16.0) * side as f64 / 48.0;
            let (oy, ox) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            for y in 0..side {
                for x in 0..side {
                    let sy = ((y as f64 + oy) / cell * PI).sin();
                    let sx = ((x as f64 + ox) / cell * PI).sin();
                    out[y * side + x] = lerp3(c0, c1, 0.5 + 0.25 * (sy * sx * 3.0).tanh());
                }
            }
        }
    }
    for px in out.iter_mut() {
        for c in px.iter_mut() {
            *c += rng.random_range(-0.03..0.03);
        }
    }
    out
}

const SUPERSAMPLE: usize = 3;

struct Placement {
    top: f64,
    left: f64,
    size: f64,
    color: [f64; 3],
}

fn coverage(kind: ShapeKind, p: &Placement, y: usize, x: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let u = (px - p.left) / p.size * 2.0 - 1.0;
            let v = (py - p.top) / p.size * 2.0 - 1.0;
            if u.abs() <= 1.0 && v.abs() <= 1.0 && kind.contains(u, v) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn tight_box(cov: &[f64], side: usize) -> Option<BBox> {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..side {
        for x in 0..side {
            if cov[y * side + x] >= 0.5 {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
    }
    (y0 != usize::MAX).then(|| BBox {
        top: y0,
        left: x0,
        height: y1 - y0,
        width: x1 - x0,
    })
}

/// Renders one image. Geometry and texture use separate streams.
fn render(
    seed: u64,
    family: TextureFamily,
    class_id: usize,
    index: usize,
    side: usize,
) -> LabeledImage {
    let kind = CATALOG[class_id];
    let mut geo = stream(seed, &[tags::SYNTH_GEOMETRY, class_id as u64, index as u64]);
    let mut tex = stream(
        seed,
        &[
            tags::SYNTH_TEXTURE,
            family.id(),
            class_id as u64,
            index as u64,
        ],
    );
    let bg = draw_background(family, side, &mut tex);

    let area = (side * side) as f64;
    let (cov, gt_box, placement) = loop {
        let size = geo.random_range(0.38..0.72) * side as f64;
        let placement = Placement {
            top: geo.random_range(0.0..=(side as f64 - size)),
            left: geo.random_range(0.0..=(side as f64 - size)),
            size,
            color: hsv_to_rgb(
                geo.random::<f64>(),
                geo.random_range(0.65..1.0),
                geo.random_range(0.8..1.0),
            ),
        };
        let cov: Vec<f64> = (0..side * side)
            .map(|i| coverage(kind, &placement, i / side, i % side))
            .collect();
        if let Some(b) = tight_box(&cov, side) {
            let frac = b.area() as f64 / area;
            if (0.04..=0.60).contains(&frac) {
                break (cov, b, placement);
            }
        }
    };

    let mut pixels = Vec::with_capacity(side * side * CHANNELS);
    for (i, a) in cov.iter().enumerate() {
        let grain: f64 = if *a > 0.0 {
            geo.random_range(-0.025..0.025)
        } else {
            0.0
        };
        for c in 0..CHANNELS {
            let v = bg[i][c] * (1.0 - a) + (placement.color[c] + grain) * a;
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    LabeledImage {
        image: Image { side, pixels },
        class_id,
        gt_box: Some(gt_box),
    }
}

/// Renders `images_per_class` images for each listed catalog class.
pub fn generate_classes(
    seed: u64,
    class_ids: &[usize],
    images_per_class: usize,
    family: TextureFamily,
    side: usize,
) -> Result<Collection> {
    if side < 16 {
        return Err(Error::Config(format!("synthetic side {side} < 16")));
    }
    if let Some(bad) = class_ids.iter().find(|&&c| c >= CATALOG.len()) {
        return Err(Error::Config(format!(
            "synthetic class {bad} outside catalog of {}",
            CATALOG.len()
        )));
    }
    let classes = class_ids
        .iter()
        .map(|&class_id| ClassGroup {
            class_id,
            name: CATALOG[class_id].name(),
            images: (0..images_per_class)
                .map(|i| render(seed, family, class_id, i, side))
                .collect(),
        })
        .collect();
    Ok(Collection {
        name: format!("synth{}", family.letter()),
        side,
        classes,
        excluded: Vec::new(),
    })
}

/// Synthetic domain with the first `n_classes` catalog shapes.
pub fn generate_synthetic_domain(
    seed: u64,
    n_classes: usize,
    images_per_class: usize,
    family: TextureFamily,
    side: usize,
) -> Result<Collection> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "n_classes = {n_classes}, need at least 2"
        )));
    }
    if n_classes > CATALOG.len() {
        return Err(Error::Config(format!(
            "n_classes = {n_classes} exceeds the {}-shape catalog",
            CATALOG.len()
        )));
    }
    let ids: Vec<usize> = (0..n_classes).collect();
    generate_classes(seed, &ids, images_per_class, family, side)
}
