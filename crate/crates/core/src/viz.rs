//! PNG renderings of localization results and expanded support sets.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::{BBox, Image};
use crate::error::{Error, Result};
use crate::expand::ExpandedSupportSet;
use crate::wsol::Localization;

pub const PREDICTED: Rgb<u8> = Rgb([230, 40, 40]);
pub const GROUND_TRUTH: Rgb<u8> = Rgb([40, 210, 60]);
const GAP: u32 = 2;
const BACKDROP: Rgb<u8> = Rgb([255, 255, 255]);

/// Draws a one-pixel rectangle outline; pixels outside the canvas are dropped.
pub fn draw_box(canvas: &mut RgbImage, bbox: &BBox, color: Rgb<u8>) {
    if bbox.height == 0 || bbox.width == 0 {
        return;
    }
    let (top, left) = (bbox.top as u32, bbox.left as u32);
    let (bottom, right) = ((bbox.bottom() - 1) as u32, (bbox.right() - 1) as u32);
    let mut put = |x: u32, y: u32| {
        if x < canvas.width() && y < canvas.height() {
            canvas.put_pixel(x, y, color);
        }
    };
    for x in left..=right {
        put(x, top);
        put(x, bottom);
    }
    for y in top..=bottom {
        put(left, y);
        put(right, y);
    }
}

/// Blue → red ramp over `[0, 1]`.
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// Activation normalized to `[0, 1]` (all zeros when flat).
fn normalized(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Three panels side by side: the image with boxes, the activation blended
/// over the image, and the binary mask. Predicted box in red, ground truth
/// in green.
pub fn wsol_panel(image: &Image, loc: &Localization, gt: Option<BBox>) -> RgbImage {
    let side = image.side() as u32;
    let mut canvas = RgbImage::from_pixel(3 * side + 2 * GAP, side, BACKDROP);
    let base = image.to_rgb8();
    let act = normalized(&loc.activation.upsampled);
    for y in 0..side {
        for x in 0..side {
            let p = base.get_pixel(x, y).0;
            let i = (y * side + x) as usize;
            let h = heat(act[i]);
            let blend: [u8; 3] =
                std::array::from_fn(|c| (0.5 * p[c] as f64 + 0.5 * 255.0 * h[c]).round() as u8);
            let m = if loc.mask.bits[i] { 255 } else { 0 };
            canvas.put_pixel(x, y, Rgb(p));
            canvas.put_pixel(side + GAP + x, y, Rgb(blend));
            canvas.put_pixel(2 * (side + GAP) + x, y, Rgb([m, m, m]));
        }
    }
    let pred = loc.bbox.to_bbox();
    for offset in [0, side + GAP, 2 * (side + GAP)] {
        let shift = |b: BBox| BBox {
            left: b.left + offset as usize,
            ..b
        };
        if let Some(g) = gt {
            draw_box(&mut canvas, &shift(g), GROUND_TRUTH);
        }
        draw_box(&mut canvas, &shift(pred), PREDICTED);
    }
    canvas
}

/// Stacks images vertically with a gap.
pub fn stack_rows(rows: &[RgbImage]) -> RgbImage {
    let width = rows.iter().map(RgbImage::width).max().unwrap_or(0);
    let height = rows
        .iter()
        .map(|r| r.height() + GAP)
        .sum::<u32>()
        .saturating_sub(GAP);
    let mut canvas = RgbImage::from_pixel(width, height, BACKDROP);
    let mut y0 = 0;
    for r in rows {
        image::imageops::replace(&mut canvas, r, 0, y0 as i64);
        y0 += r.height() + GAP;
    }
    canvas
}

/// One row per class of S′, in insertion order within the class.
pub fn expansion_grid(set: &ExpandedSupportSet) -> RgbImage {
    let side = set.samples.first().map_or(0, |s| s.image.side() as u32);
    let cols = set.by_class.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let rows = set.by_class.len() as u32;
    let mut canvas = RgbImage::from_pixel(
        (cols * (side + GAP)).saturating_sub(GAP),
        (rows * (side + GAP)).saturating_sub(GAP),
        BACKDROP,
    );
    for (r, members) in set.by_class.iter().enumerate() {
        for (c, &idx) in members.iter().enumerate() {
            let tile = set.samples[idx].image.to_rgb8();
            let (x, y) = (c as u32 * (side + GAP), r as u32 * (side + GAP));
            image::imageops::replace(&mut canvas, &tile, x as i64, y as i64);
        }
    }
    canvas
}

pub fn save_png(canvas: &RgbImage, path: &Path) -> Result<()> {
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
