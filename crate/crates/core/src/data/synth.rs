//! Synthetic stand-ins for the two pre-training domains.
//!
//! `natural_like`: one to five large, high-contrast shapes (ellipse = 1,
//! rectangle = 2, triangle = 3) over a sinusoidal texture. Later shapes occlude
//! earlier ones and masks keep only the visible pixels.
//!
//! `cell_like`: eight to forty small, dim, non-overlapping ellipses (category 1)
//! on a nearly flat background with additive Gaussian noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageSample, InstanceAnnotation, Mask};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    NaturalLike,
    CellLike,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::NaturalLike => "natural_like",
            Domain::CellLike => "cell_like",
        }
    }

    /// Category vocabulary as `(id, name)` pairs.
    pub fn categories(&self) -> Vec<(u32, &'static str)> {
        match self {
            Domain::NaturalLike => vec![(1, "ellipse"), (2, "rectangle"), (3, "triangle")],
            Domain::CellLike => vec![(1, "cell")],
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural_like" | "natural-like" => Ok(Domain::NaturalLike),
            "cell_like" | "cell-like" => Ok(Domain::CellLike),
            other => Err(Error::arg(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { height: 64, width: 64 }
    }
}

pub fn synth_dataset(domain: Domain, n_images: usize, seed: u64) -> Result<Vec<ImageSample>> {
    synth_dataset_with(domain, n_images, seed, SynthConfig::default())
}

pub fn synth_dataset_with(
    domain: Domain,
    n_images: usize,
    seed: u64,
    config: SynthConfig,
) -> Result<Vec<ImageSample>> {
    if n_images == 0 {
        return Err(Error::arg("n_images must be at least 1"));
    }
    if config.height < 32 || config.width < 32 {
        return Err(Error::arg("synthetic images must be at least 32x32"));
    }
    (0..n_images)
        .map(|i| {
            let mut rng = rng::seeded(rng::derive(seed, domain.as_str(), i as u64));
            let id = format!("{}_{}_{:05}", domain.as_str(), seed, i);
            match domain {
                Domain::NaturalLike => natural_image(id, config, &mut rng),
                Domain::CellLike => cell_image(id, config, &mut rng),
            }
        })
        .collect()
}

/// A filled shape evaluated at pixel centers.
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let dx = px - cx;
                let dy = py - cy;
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let d0 = edge(pts[0], pts[1]);
                let d1 = edge(pts[1], pts[2]);
                let d2 = edge(pts[2], pts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn natural_image(id: String, cfg: SynthConfig, rng: &mut Rng) -> Result<ImageSample> {
    let (h, w) = (cfg.height, cfg.width);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let base: f64 = rng.random_range(0.3..0.7);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.15..0.7);
            let dir = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.04..0.1);
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();
    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = base;
            for &(fx, fy, ph, amp) in &waves {
                v += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            img[y * w + x] = v + noise.sample(rng);
        }
    }

    let n = rng.random_range(1..=5usize);
    let mut owner = vec![usize::MAX; h * w];
    let mut cats = Vec::with_capacity(n);
    let mut full_area = Vec::with_capacity(n);
    for k in 0..n {
        let cat = rng.random_range(1..=3u32);
        let r = rng.random_range(6.0..16.0f64);
        let cx = rng.random_range(r..w as f64 - r);
        let cy = rng.random_range(r..h as f64 - r);
        let shape = match cat {
            1 => Shape::Ellipse {
                cx,
                cy,
                rx: r,
                ry: r * rng.random_range(0.55..1.0),
                angle: rng.random_range(0.0..PI),
            },
            2 => {
                let hw = r;
                let hh = r * rng.random_range(0.5..1.0);
                Shape::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
            }
            _ => {
                let a0 = rng.random_range(0.0..2.0 * PI);
                let mut pts = [(0.0, 0.0); 3];
                for (j, p) in pts.iter_mut().enumerate() {
                    let a = a0 + j as f64 * 2.0 * PI / 3.0 + rng.random_range(-0.3..0.3);
                    *p = (cx + r * a.cos(), cy + r * a.sin());
                }
                Shape::Triangle { pts }
            }
        };
        let fill = if rng.random_bool(0.5) {
            rng.random_range(0.0..0.15)
        } else {
            rng.random_range(0.85..1.0)
        };
        let (gx, gy) = (rng.random_range(-0.004..0.004), rng.random_range(-0.004..0.004));
        let mut area = 0usize;
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    let shade = gx * (x as f64 - cx) + gy * (y as f64 - cy);
                    img[y * w + x] = fill + shade + noise.sample(rng) * 0.5;
                    owner[y * w + x] = k;
                    area += 1;
                }
            }
        }
        cats.push(cat);
        full_area.push(area);
    }

    let mut sample = ImageSample::new_gray(id, h, w, img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())?;
    for k in 0..n {
        let mut mask = Mask::zeros(h, w);
        for (i, &o) in owner.iter().enumerate() {
            if o == k {
                mask.data[i] = 1;
            }
        }
        let visible = mask.area();
        // Heavily occluded shapes are dropped rather than labelled as slivers.
        if visible >= 4 && (visible as f64) >= 0.3 * full_area[k] as f64 {
            sample.annotations.push(InstanceAnnotation::from_mask(cats[k], mask)?);
        }
    }
    Ok(sample)
}

fn cell_image(id: String, cfg: SynthConfig, rng: &mut Rng) -> Result<ImageSample> {
    let (h, w) = (cfg.height, cfg.width);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let base: f64 = rng.random_range(0.35..0.5);
    let (gx, gy) = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = base + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
        }
    }

    let target = rng.random_range(8..=40usize);
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(target);
    let mut shapes = Vec::with_capacity(target);
    let mut attempts = 0;
    while placed.len() < target && attempts < 20_000 {
        attempts += 1;
        let rx = rng.random_range(2.0..4.5f64);
        let ry = rng.random_range(2.0..4.5f64);
        let rmax = rx.max(ry);
        let cx = rng.random_range(rmax + 1.0..w as f64 - rmax - 1.0);
        let cy = rng.random_range(rmax + 1.0..h as f64 - rmax - 1.0);
        if placed
            .iter()
            .any(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() < pr + rmax + 1.0)
        {
            continue;
        }
        placed.push((cx, cy, rmax));
        let angle = rng.random_range(0.0..PI);
        let delta = rng.random_range(0.06..0.14);
        shapes.push((Shape::Ellipse { cx, cy, rx, ry, angle }, delta));
    }

    let mut sample_annotations = Vec::with_capacity(shapes.len());
    for (shape, delta) in &shapes {
        let Shape::Ellipse { cx, cy, rx, ry, .. } = *shape else { unreachable!() };
        let mut mask = Mask::zeros(h, w);
        let rmax = rx.max(ry);
        let (x0, x1) = ((cx - rmax - 1.0).max(0.0) as usize, ((cx + rmax + 2.0) as usize).min(w));
        let (y0, y1) = ((cy - rmax - 1.0).max(0.0) as usize, ((cy + rmax + 2.0) as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if shape.contains(px, py) {
                    mask.set(y, x, true);
                    let d2 = ((px - cx).powi(2) + (py - cy).powi(2)) / (rmax * rmax);
                    img[y * w + x] += delta * (1.0 - 0.3 * d2.min(1.0));
                }
            }
        }
        sample_annotations.push(InstanceAnnotation::from_mask(1, mask)?);
    }
    for v in img.iter_mut() {
        *v += noise.sample(rng);
    }
    let mut sample = ImageSample::new_gray(id, h, w, img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())?;
    sample.annotations = sample_annotations;
    Ok(sample)
}
