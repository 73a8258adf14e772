//! Two-view augmentation for contrastive training: random resized crop, flips,
//! brightness/contrast jitter and Gaussian blur. All transforms work on the
//! luminance plane.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side length of the square output views.
    pub output_size: usize,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    /// Skip cropping and resize the whole image.
    pub full_crop: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            output_size: 32,
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            full_crop: false,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.5),
        }
    }
}

impl AugmentConfig {
    /// Every random transform disabled and the crop fixed to the full image.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            full_crop: true,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Square grayscale view.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub size: usize,
    pub pixels: Vec<f64>,
}

pub fn two_views(image: &ImageSample, seed: u64) -> Result<(View, View)> {
    two_views_with(image, seed, &AugmentConfig::default())
}

pub fn two_views_with(image: &ImageSample, seed: u64, cfg: &AugmentConfig) -> Result<(View, View)> {
    if cfg.output_size == 0 {
        return Err(Error::arg("augmentation output size must be positive"));
    }
    let (plane, h, w) = padded_gray(image, 2 * cfg.output_size);
    let mut r1 = rng::seeded(rng::derive(seed, "view", 1));
    let mut r2 = rng::seeded(rng::derive(seed, "view", 2));
    Ok((
        augment_once(&plane, h, w, cfg, &mut r1),
        augment_once(&plane, h, w, cfg, &mut r2),
    ))
}

/// Luminance plane, padded bottom/right with its mean up to `min_side`.
fn padded_gray(image: &ImageSample, min_side: usize) -> (Vec<f64>, usize, usize) {
    let gray = image.gray();
    let (h, w) = (image.height, image.width);
    if h >= min_side && w >= min_side {
        return (gray, h, w);
    }
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    let (ph, pw) = (h.max(min_side), w.max(min_side));
    let mut out = vec![mean; ph * pw];
    for y in 0..h {
        out[y * pw..y * pw + w].copy_from_slice(&gray[y * w..(y + 1) * w]);
    }
    (out, ph, pw)
}

fn augment_once(plane: &[f64], h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> View {
    let (cy, cx, ch, cw) = if cfg.full_crop {
        (0.0, 0.0, h as f64, w as f64)
    } else {
        sample_crop(h, w, cfg, rng)
    };
    let mut out = resize_crop(plane, h, w, (cy, cx, ch, cw), cfg.output_size);
    let n = cfg.output_size;
    if rng.random_bool(cfg.hflip_prob) {
        for row in out.chunks_mut(n) {
            row.reverse();
        }
    }
    if rng.random_bool(cfg.vflip_prob) {
        for y in 0..n / 2 {
            for x in 0..n {
                out.swap(y * n + x, (n - 1 - y) * n + x);
            }
        }
    }
    if rng.random_bool(cfg.jitter_prob) {
        let b = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness);
        let c = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
        let mean = out.iter().sum::<f64>() / out.len() as f64 * b;
        for v in out.iter_mut() {
            *v = ((*v * b - mean) * c + mean).clamp(0.0, 1.0);
        }
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        out = gaussian_blur(&out, n, n, sigma);
    }
    View { size: n, pixels: out }
}

/// Random-resized-crop box `(y, x, h, w)`; falls back to the largest
/// centered crop with a valid aspect ratio.
fn sample_crop(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> (f64, f64, f64, f64) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale.0..=cfg.scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w as f64 && ch <= h as f64 && cw >= 1.0 && ch >= 1.0 {
            let y = rng.random_range(0.0..=h as f64 - ch);
            let x = rng.random_range(0.0..=w as f64 - cw);
            return (y, x, ch, cw);
        }
    }
    let side = h.min(w) as f64;
    ((h as f64 - side) / 2.0, (w as f64 - side) / 2.0, side, side)
}

fn resize_crop(plane: &[f64], h: usize, w: usize, crop: (f64, f64, f64, f64), n: usize) -> Vec<f64> {
    let (cy, cx, ch, cw) = crop;
    let sy = ch / n as f64;
    let sx = cw / n as f64;
    let sample = |y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
        let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut out = Vec::with_capacity(n * n);
    for oy in 0..n {
        for ox in 0..n {
            let y = cy + (oy as f64 + 0.5) * sy - 0.5;
            let x = cx + (ox as f64 + 0.5) * sx - 0.5;
            out.push(sample(y, x));
        }
    }
    out
}

pub(crate) fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}
