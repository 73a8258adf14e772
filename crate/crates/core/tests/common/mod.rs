//! Random small evaluation scenes shared by the eval and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use segpre::data::{BBox, Mask};
use segpre::eval::{ApReport, GroundTruth, Prediction};

pub const SIDE: usize = 32;

pub fn rect_mask(b: BBox, rng: &mut ChaCha8Rng, holes: bool) -> Mask {
    let mut m = Mask::zeros(SIDE, SIDE);
    for y in b.y as usize..b.bottom() as usize {
        for x in b.x as usize..b.right() as usize {
            if !holes || rng.random::<f64>() > 0.15 {
                m.set(y, x, true);
            }
        }
    }
    m
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..24) as f64;
    let y = rng.random_range(0..24) as f64;
    let w = rng.random_range(2..=(SIDE - x as usize).min(14)) as f64;
    let h = rng.random_range(2..=(SIDE - y as usize).min(14)) as f64;
    BBox::new(x, y, w, h)
}

pub fn jitter(b: BBox, rng: &mut ChaCha8Rng) -> BBox {
    let mut d = || rng.random_range(-2i32..=2) as f64;
    let x0 = (b.x + d()).clamp(0.0, SIDE as f64 - 1.0);
    let y0 = (b.y + d()).clamp(0.0, SIDE as f64 - 1.0);
    let x1 = (b.right() + d()).clamp(x0 + 1.0, SIDE as f64);
    let y1 = (b.bottom() + d()).clamp(y0 + 1.0, SIDE as f64);
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

pub struct Scene {
    pub preds: Vec<Prediction>,
    pub gts: Vec<GroundTruth>,
}

/// Small scene with clustered boxes, duplicate ground truth and score ties so
/// that matching order actually matters. `distinct` draws continuous scores.
pub fn scene(rng: &mut ChaCha8Rng, distinct: bool) -> Scene {
    let mut preds = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    let holes = rng.random_bool(0.5);
    for img in 0..rng.random_range(1..=3) {
        let id = format!("img{img}");
        let first = gts.len();
        for _ in 0..rng.random_range(0..=5) {
            let b = if gts.len() > first && rng.random_bool(0.3) {
                let src = &gts[rng.random_range(first..gts.len())];
                if rng.random_bool(0.5) {
                    src.bbox
                } else {
                    jitter(src.bbox, rng)
                }
            } else {
                random_box(rng)
            };
            gts.push(GroundTruth {
                image_id: id.clone(),
                category: rng.random_range(1..=2),
                bbox: b,
                mask: rect_mask(b, rng, holes),
            });
        }
        let own: Vec<GroundTruth> = gts[first..].to_vec();
        for _ in 0..rng.random_range(0..=6) {
            let (b, cat) = if !own.is_empty() && rng.random_bool(0.7) {
                let g = &own[rng.random_range(0..own.len())];
                let cat = if rng.random_bool(0.85) { g.category } else { 3 - g.category };
                (jitter(g.bbox, rng), cat)
            } else {
                (random_box(rng), rng.random_range(1..=2))
            };
            let score = if distinct {
                rng.random::<f64>()
            } else {
                rng.random_range(1..=5) as f64 / 5.0
            };
            preds.push(Prediction {
                image_id: id.clone(),
                category: cat,
                score,
                bbox: b,
                mask: rect_mask(b, rng, holes),
            });
        }
    }
    Scene { preds, gts }
}

pub fn ap_values(r: &ApReport) -> Vec<Option<f64>> {
    let mut v = vec![r.ap];
    v.extend(r.thresholds.iter().map(|t| t.ap));
    v.extend(r.per_category.iter().map(|c| c.1));
    v
}

