//! COCO-style evaluation: decoding detector output into instances, box and
//! mask IoU, greedy matching over the IoU ladder and 101-point interpolated
//! AP, plus an exhaustive matching oracle for small scenes.

mod decode;
mod oracle;
mod results;

pub use decode::{decode_predictions, nms, DecodeConfig};
pub use oracle::oracle_ap;
pub use results::{predictions_from_results, results_json, ResultEntry};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, ImageSample, Mask};
use crate::error::{Error, Result};
use crate::model::{prepare_input, Detector, DetectorParams};

pub const NUM_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;
pub const DEFAULT_MAX_DETS: usize = 300;
/// Area cutoffs (in pixels) of the standard size buckets.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub category: u32,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub category: u32,
    pub bbox: BBox,
    pub mask: Mask,
}

pub fn ground_truth_of(samples: &[ImageSample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .flat_map(|s| {
            s.annotations.iter().map(move |a| GroundTruth {
                image_id: s.id.clone(),
                category: a.category,
                bbox: a.bbox,
                mask: a.mask.clone(),
            })
        })
        .collect()
}

/// Runs the detector over `samples` (in parallel on the current rayon pool)
/// and decodes each output. Results keep sample order.
pub fn predict(det: &Detector, params: &DetectorParams, samples: &[ImageSample], config: &DecodeConfig) -> Result<Vec<Prediction>> {
    det.check_params(params)?;
    let per_image: Vec<Vec<Prediction>> = samples
        .par_iter()
        .map(|s| {
            let x = prepare_input(&s.gray(), s.height, s.width)?;
            let out = det.forward(params, &x, (s.height, s.width))?;
            decode_predictions(&out, &s.id, config)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    Bbox,
    Segm,
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::arg(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub(crate) fn pair_iou(kind: IouKind, p: &Prediction, g: &GroundTruth) -> Result<f64> {
    match kind {
        IouKind::Bbox => Ok(box_iou(&p.bbox, &g.bbox)),
        IouKind::Segm => mask_iou(&p.mask, &g.mask),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub iou: f64,
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
    pub note: String,
}

/// AP for one IoU kind. `ap` is `None` when no category has ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub kind: IouKind,
    pub ap: Option<f64>,
    pub thresholds: Vec<ThresholdStats>,
    /// Mean over thresholds per category with ground truth.
    pub per_category: Vec<(u32, Option<f64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_buckets: Option<SizeBuckets>,
}

impl ApReport {
    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| (t.iou - iou).abs() < 1e-9).and_then(|t| t.ap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_bbox: Option<f64>,
    pub ap_segm: Option<f64>,
    pub bbox: ApReport,
    pub segm: ApReport,
    pub num_images: usize,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "images {}  predictions {}  ground truth {}",
            self.num_images, self.num_predictions, self.num_ground_truth
        );
        let _ = writeln!(s, "AP_bbox {}  AP_segm {}", fmt(self.ap_bbox), fmt(self.ap_segm));
        let _ = writeln!(
            s,
            "{:>5} | {:>8} {:>5} {:>5} {:>5} {:>7} | {:>8} {:>5} {:>5} {:>5} {:>7}",
            "IoU", "bbox AP", "TP", "FP", "FN", "recall", "segm AP", "TP", "FP", "FN", "recall"
        );
        for (b, m) in self.bbox.thresholds.iter().zip(&self.segm.thresholds) {
            let _ = writeln!(
                s,
                "{:>5.2} | {:>8} {:>5} {:>5} {:>5} {:>7} | {:>8} {:>5} {:>5} {:>5} {:>7}",
                b.iou,
                fmt(b.ap),
                b.tp,
                b.fp,
                b.fn_,
                fmt(b.recall),
                fmt(m.ap),
                m.tp,
                m.fp,
                m.fn_,
                fmt(m.recall)
            );
        }
        for r in [&self.bbox, &self.segm] {
            if let Some(sb) = &r.size_buckets {
                let kind = match r.kind {
                    IouKind::Bbox => "bbox",
                    IouKind::Segm => "segm",
                };
                let _ = writeln!(
                    s,
                    "{kind} AP by size (small/medium/large): {} / {} / {}  [{}]",
                    fmt(sb.small),
                    fmt(sb.medium),
                    fmt(sb.large),
                    sb.note
                );
            }
        }
        s
    }
}

/// Both IoU kinds, with size buckets.
pub fn evaluate(predictions: &[Prediction], ground_truth: &[GroundTruth], num_images: usize) -> Result<EvalReport> {
    let bbox = average_precision_with(predictions, ground_truth, IouKind::Bbox, DEFAULT_MAX_DETS, true)?;
    let segm = average_precision_with(predictions, ground_truth, IouKind::Segm, DEFAULT_MAX_DETS, true)?;
    Ok(EvalReport {
        ap_bbox: bbox.ap,
        ap_segm: segm.ap,
        bbox,
        segm,
        num_images,
        num_predictions: predictions.len(),
        num_ground_truth: ground_truth.len(),
    })
}

pub fn average_precision(predictions: &[Prediction], ground_truth: &[GroundTruth], kind: IouKind) -> Result<ApReport> {
    average_precision_with(predictions, ground_truth, kind, DEFAULT_MAX_DETS, false)
}

/// Images in first-seen order over ground truth, then predictions.
pub(crate) fn image_order(predictions: &[Prediction], ground_truth: &[GroundTruth]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut order = Vec::new();
    for id in ground_truth.iter().map(|g| &g.image_id).chain(predictions.iter().map(|p| &p.image_id)) {
        if seen.insert(id.clone()) {
            order.push(id.clone());
        }
    }
    order
}

/// Indices of `predictions` for `image`, by descending score with stable
/// ties, truncated to `max_dets`.
pub(crate) fn ranked_for_image(predictions: &[Prediction], image: &str, max_dets: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..predictions.len()).filter(|&i| predictions[i].image_id == image).collect();
    idx.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));
    idx.truncate(max_dets);
    idx
}

pub(crate) fn validate_predictions(predictions: &[Prediction]) -> Result<()> {
    if let Some(p) = predictions.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::arg(format!("prediction on {} has a non-finite score", p.image_id)));
    }
    Ok(())
}

/// Ranked detections of one category: `(score, is_true_positive)` in the
/// order used to build the precision/recall curve.
pub(crate) type Ranked = Vec<(f64, bool)>;

/// 101-point interpolated area under the precision/recall curve.
pub(crate) fn interpolated_ap(ranked: &Ranked, num_gt: usize) -> f64 {
    let n = ranked.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / 100.0;
        while k < n && recall[k] < target {
            k += 1;
        }
        if k < n {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Sorts per-image matched detections into one category ranking.
pub(crate) fn merge_ranked(mut items: Vec<(f64, bool)>) -> Ranked {
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    items
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn average_precision_with(
    predictions: &[Prediction],
    ground_truth: &[GroundTruth],
    kind: IouKind,
    max_dets: usize,
    with_sizes: bool,
) -> Result<ApReport> {
    validate_predictions(predictions)?;
    let mut report = ap_core(predictions, ground_truth, kind, max_dets)?;
    if with_sizes {
        let bucket = |lo: f64, hi: f64| -> Result<Option<f64>> {
            let area_of = |m: &Mask, b: &BBox| match kind {
                IouKind::Bbox => b.area(),
                IouKind::Segm => m.area() as f64,
            };
            let g: Vec<GroundTruth> = ground_truth
                .iter()
                .filter(|x| (lo..hi).contains(&area_of(&x.mask, &x.bbox)))
                .cloned()
                .collect();
            let p: Vec<Prediction> = predictions
                .iter()
                .filter(|x| (lo..hi).contains(&area_of(&x.mask, &x.bbox)))
                .cloned()
                .collect();
            Ok(ap_core(&p, &g, kind, max_dets)?.ap)
        };
        report.size_buckets = Some(SizeBuckets {
            small: bucket(0.0, SMALL_AREA)?,
            medium: bucket(SMALL_AREA, MEDIUM_AREA)?,
            large: bucket(MEDIUM_AREA, f64::INFINITY)?,
            note: "standard COCO area cutoffs (32², 96²); non-normative".into(),
        });
    }
    Ok(report)
}

fn ap_core(predictions: &[Prediction], ground_truth: &[GroundTruth], kind: IouKind, max_dets: usize) -> Result<ApReport> {
    let images = image_order(predictions, ground_truth);
    let categories: BTreeSet<u32> = ground_truth.iter().map(|g| g.category).collect();
    let thresholds = iou_thresholds();
    let ranked_by_image: Vec<Vec<usize>> = images.iter().map(|im| ranked_for_image(predictions, im, max_dets)).collect();
    let gt_by_image: Vec<Vec<usize>> = images
        .iter()
        .map(|im| (0..ground_truth.len()).filter(|&j| ground_truth[j].image_id == *im).collect())
        .collect();

    // IoU tables per image: rows = ranked predictions, cols = image GTs.
    let mut ious: Vec<Vec<Vec<f64>>> = Vec::with_capacity(images.len());
    for (preds, gts) in ranked_by_image.iter().zip(&gt_by_image) {
        let mut table = Vec::with_capacity(preds.len());
        for &p in preds {
            let row = gts
                .iter()
                .map(|&g| {
                    if predictions[p].category == ground_truth[g].category {
                        pair_iou(kind, &predictions[p], &ground_truth[g])
                    } else {
                        Ok(0.0)
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            table.push(row);
        }
        ious.push(table);
    }

    let mut per_threshold_cat: Vec<Vec<f64>> = vec![Vec::new(); NUM_THRESHOLDS];
    let mut stats = Vec::with_capacity(NUM_THRESHOLDS);
    for (ti, &t) in thresholds.iter().enumerate() {
        let (mut tp_all, mut fp_all, mut gt_all) = (0, 0, 0);
        for &c in &categories {
            let mut items = Vec::new();
            let mut num_gt = 0;
            for (ii, (preds, gts)) in ranked_by_image.iter().zip(&gt_by_image).enumerate() {
                let cat_gts: Vec<usize> = (0..gts.len()).filter(|&k| ground_truth[gts[k]].category == c).collect();
                num_gt += cat_gts.len();
                let mut taken = vec![false; gts.len()];
                for (r, &p) in preds.iter().enumerate() {
                    if predictions[p].category != c {
                        continue;
                    }
                    let mut best: Option<(usize, f64)> = None;
                    for &k in &cat_gts {
                        let v = ious[ii][r][k];
                        if !taken[k] && v >= t && best.is_none_or(|(_, b)| v > b) {
                            best = Some((k, v));
                        }
                    }
                    if let Some((k, _)) = best {
                        taken[k] = true;
                    }
                    items.push((predictions[p].score, best.is_some()));
                }
            }
            let ranked = merge_ranked(items);
            let tp = ranked.iter().filter(|x| x.1).count();
            tp_all += tp;
            fp_all += ranked.len() - tp;
            gt_all += num_gt;
            per_threshold_cat[ti].push(interpolated_ap(&ranked, num_gt));
        }
        stats.push(ThresholdStats {
            iou: t,
            ap: mean(per_threshold_cat[ti].iter().copied()),
            tp: tp_all,
            fp: fp_all,
            fn_: gt_all - tp_all,
            recall: (gt_all > 0).then(|| tp_all as f64 / gt_all as f64),
        });
    }
    let per_category = categories
        .iter()
        .enumerate()
        .map(|(ci, &c)| (c, mean(per_threshold_cat.iter().map(|row| row[ci]))))
        .collect();
    let ap = if categories.is_empty() {
        None
    } else {
        mean(stats.iter().map(|s| s.ap.expect("categories present")))
    };
    Ok(ApReport {
        kind,
        ap,
        thresholds: stats,
        per_category,
        size_buckets: None,
    })
}
