use serde::{Deserialize, Serialize};

use super::{box_iou, Prediction, DEFAULT_MAX_DETS};
use crate::data::{BBox, Mask};
use crate::error::{Error, Result};
use crate::model::{decode_box, DetectionOutput, LevelOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: DEFAULT_MAX_DETS,
        }
    }
}

/// Class-wise greedy suppression: visiting by descending score (stable), a
/// prediction is dropped when its box overlaps an already kept box of the
/// same category with IoU above `iou`. Returns kept indices in visit order.
pub fn nms(predictions: &[Prediction], iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let p = &predictions[i];
        let suppressed = kept
            .iter()
            .any(|&k| predictions[k].category == p.category && box_iou(&predictions[k].bbox, &p.bbox) > iou);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

struct Candidate {
    level: usize,
    loc: usize,
    category: u32,
    score: f64,
    bbox: BBox,
}

/// Turns dense output into scored instances: each location whose best
/// foreground probability reaches `score_thresh` proposes one instance;
/// class-wise NMS follows; the surviving mask patches are resampled into
/// their boxes and binarized at probability 0.5.
pub fn decode_predictions(output: &DetectionOutput, image_id: &str, config: &DecodeConfig) -> Result<Vec<Prediction>> {
    for (name, v) in [("score_thresh", config.score_thresh), ("nms_iou", config.nms_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let (ih, iw) = (output.image_height as f64, output.image_width as f64);
    let mut cands = Vec::new();
    for (li, level) in output.levels.iter().enumerate() {
        let hw = level.height() * level.width();
        let k1 = output.num_classes + 1;
        for loc in 0..hw {
            let logits: Vec<f64> = (0..k1).map(|c| level.class_logits.data[c * hw + loc]).collect();
            if logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::arg("class logits are not finite"));
            }
            let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|z| (z - zmax).exp()).sum();
            let (best_c, best_p) = (1..k1)
                .map(|c| (c, (logits[c] - zmax).exp() / denom))
                .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best_c == 0 || best_p < config.score_thresh {
                continue;
            }
            let off: [f64; 4] = std::array::from_fn(|j| level.box_offsets.data[j * hw + loc]);
            let (row, col) = (loc / level.width(), loc % level.width());
            let bbox = decode_box(row, col, level.stride, off).clip(iw, ih);
            if bbox.w <= 0.0 || bbox.h <= 0.0 {
                continue;
            }
            cands.push(Candidate {
                level: li,
                loc,
                category: best_c as u32,
                score: best_p,
                bbox,
            });
        }
    }
    // Suppress on boxes alone, then rasterize only the survivors.
    let empty = Mask::zeros(0, 0);
    let shells: Vec<Prediction> = cands
        .iter()
        .map(|c| Prediction {
            image_id: image_id.to_string(),
            category: c.category,
            score: c.score,
            bbox: c.bbox,
            mask: empty.clone(),
        })
        .collect();
    let mut kept = nms(&shells, config.nms_iou);
    kept.truncate(config.max_dets);
    Ok(kept
        .into_iter()
        .map(|i| {
            let c = &cands[i];
            let mut p = shells[i].clone();
            p.mask = paste_mask(&output.levels[c.level], c.loc, output.mask_size, &c.bbox, output.image_height, output.image_width);
            p
        })
        .collect())
}

/// Bilinear resampling of an `m`x`m` logit patch over `bbox`, thresholded at 0.
fn paste_mask(level: &LevelOutput, loc: usize, m: usize, bbox: &BBox, h: usize, w: usize) -> Mask {
    let hw = level.height() * level.width();
    let patch = |a: usize, b: usize| level.mask_logits.data[(a * m + b) * hw + loc];
    let mut mask = Mask::zeros(h, w);
    let y0 = bbox.y.floor().max(0.0) as usize;
    let x0 = bbox.x.floor().max(0.0) as usize;
    let y1 = (bbox.bottom().ceil() as usize).min(h);
    let x1 = (bbox.right().ceil() as usize).min(w);
    let last = (m - 1) as f64;
    for y in y0..y1 {
        let v = ((y as f64 + 0.5 - bbox.y) / bbox.h * m as f64 - 0.5).clamp(0.0, last);
        let (a0, fy) = (v.floor() as usize, v - v.floor());
        let a1 = (a0 + 1).min(m - 1);
        for x in x0..x1 {
            let cx = x as f64 + 0.5;
            let cy = y as f64 + 0.5;
            if cx < bbox.x || cx > bbox.right() || cy < bbox.y || cy > bbox.bottom() {
                continue;
            }
            let u = ((cx - bbox.x) / bbox.w * m as f64 - 0.5).clamp(0.0, last);
            let (b0, fx) = (u.floor() as usize, u - u.floor());
            let b1 = (b0 + 1).min(m - 1);
            let top = patch(a0, b0) * (1.0 - fx) + patch(a0, b1) * fx;
            let bot = patch(a1, b0) * (1.0 - fx) + patch(a1, b1) * fx;
            if top * (1.0 - fy) + bot * fy >= 0.0 {
                mask.set(y, x, true);
            }
        }
    }
    mask
}
