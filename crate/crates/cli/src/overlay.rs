//! Per-image overlay PNGs: the grayscale input with predicted masks tinted,
//! box outlines, and each score printed in a 3x5 pixel font.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use segpre::data::ImageSample;
use segpre::eval::Prediction;

const PALETTE: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 200, 80],
    [70, 120, 240],
    [240, 200, 40],
    [200, 80, 220],
    [40, 210, 210],
];

/// Rows of each glyph, 3 bits wide, most significant bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0; 5],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, c: [u8; 3]) {
    for (i, ch) in s.chars().enumerate() {
        let g = glyph(ch);
        for (r, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, x + 4 * i as i64 + col, y + r as i64, c);
                }
            }
        }
    }
}

/// Draws at `scale`x the input resolution so that small images stay legible.
pub fn render(sample: &ImageSample, preds: &[&Prediction], scale: usize) -> RgbImage {
    let (w, h) = (sample.width, sample.height);
    let s = scale.max(1);
    let gray = sample.gray();
    let mut img = RgbImage::from_fn((w * s) as u32, (h * s) as u32, |x, y| {
        let (x, y) = (x as usize / s, y as usize / s);
        let v = (gray[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    for (k, p) in preds.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        if p.mask.height == h && p.mask.width == w {
            for (x, y, px) in img.enumerate_pixels_mut() {
                if p.mask.get(y as usize / s, x as usize / s) {
                    for (v, &tint) in px.0.iter_mut().zip(&c) {
                        *v = (f64::from(*v) * 0.55 + f64::from(tint) * 0.45).round() as u8;
                    }
                }
            }
        }
        let sf = s as f64;
        let (x0, y0) = ((p.bbox.x * sf).floor() as i64, (p.bbox.y * sf).floor() as i64);
        let (x1, y1) = (((p.bbox.right() * sf).ceil() as i64) - 1, ((p.bbox.bottom() * sf).ceil() as i64) - 1);
        for x in x0..=x1 {
            put(&mut img, x, y0, c);
            put(&mut img, x, y1, c);
        }
        for y in y0..=y1 {
            put(&mut img, x0, y, c);
            put(&mut img, x1, y, c);
        }
        let label = format!("{:.2}", p.score);
        text(&mut img, label.trim_start_matches('0'), x0 + 1, (y0 - 6).max(0), c);
    }
    img
}

pub fn write(path: &Path, sample: &ImageSample, preds: &[&Prediction], scale: usize) -> Result<()> {
    render(sample, preds, scale)
        .save(path)
        .with_context(|| format!("writing overlay {}", path.display()))
}
