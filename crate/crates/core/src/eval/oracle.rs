//! Brute-force reference for [`super::average_precision`] on small scenes.
//!
//! Every partial one-to-one matching between an image's predictions and its
//! ground truth (per category, per threshold) is enumerated; the single one
//! that agrees with the greedy rule (score order, stable ties; highest IoU,
//! lowest ground-truth index on ties) is kept. AP is then integrated directly
//! as the mean over recall points of the best precision at or beyond that
//! recall.

use std::collections::BTreeSet;

use super::{
    image_order, iou_thresholds, pair_iou, validate_predictions, ApReport, GroundTruth, IouKind, Prediction,
    ThresholdStats, DEFAULT_MAX_DETS, NUM_THRESHOLDS, RECALL_POINTS,
};
use crate::error::{Error, Result};

pub const ORACLE_MAX_INSTANCES: usize = 10;

pub fn oracle_ap(predictions: &[Prediction], ground_truth: &[GroundTruth], kind: IouKind) -> Result<ApReport> {
    validate_predictions(predictions)?;
    let images = image_order(predictions, ground_truth);
    for im in &images {
        let np = predictions.iter().filter(|p| &p.image_id == im).count();
        let ng = ground_truth.iter().filter(|g| &g.image_id == im).count();
        if np > ORACLE_MAX_INSTANCES || ng > ORACLE_MAX_INSTANCES {
            return Err(Error::arg(format!(
                "image {im} has {np} predictions and {ng} ground truths; the oracle handles at most {ORACLE_MAX_INSTANCES} each"
            )));
        }
    }
    let categories: BTreeSet<u32> = ground_truth.iter().map(|g| g.category).collect();
    let mut cat_ap: Vec<Vec<f64>> = Vec::new();
    let mut stats = Vec::with_capacity(NUM_THRESHOLDS);
    for t in iou_thresholds() {
        let mut row = Vec::new();
        let (mut tp_all, mut fp_all, mut gt_all) = (0usize, 0usize, 0usize);
        for &c in &categories {
            // (score, image rank, in-image rank, hit)
            let mut dets: Vec<(f64, usize, usize, bool)> = Vec::new();
            let mut num_gt = 0;
            for (ii, im) in images.iter().enumerate() {
                let ranked = rank(predictions, im);
                let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| &g.image_id == im).collect();
                let cat_preds: Vec<(usize, &Prediction)> =
                    ranked.iter().enumerate().filter(|(_, p)| p.category == c).map(|(r, p)| (r, *p)).collect();
                let cat_gts: Vec<&GroundTruth> = gts.into_iter().filter(|g| g.category == c).collect();
                num_gt += cat_gts.len();
                let table: Vec<Vec<f64>> = cat_preds
                    .iter()
                    .map(|(_, p)| cat_gts.iter().map(|g| pair_iou(kind, p, g)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?;
                let matching = greedy_consistent_matching(&table, t)?;
                for ((r, p), m) in cat_preds.iter().zip(matching) {
                    dets.push((p.score, ii, *r, m.is_some()));
                }
            }
            dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let tp = dets.iter().filter(|d| d.3).count();
            tp_all += tp;
            fp_all += dets.len() - tp;
            gt_all += num_gt;
            let hits: Vec<bool> = dets.iter().map(|d| d.3).collect();
            row.push(direct_ap(&hits, num_gt));
        }
        stats.push(ThresholdStats {
            iou: t,
            ap: average(&row),
            tp: tp_all,
            fp: fp_all,
            fn_: gt_all - tp_all,
            recall: (gt_all > 0).then(|| tp_all as f64 / gt_all as f64),
        });
        cat_ap.push(row);
    }
    let per_category = categories
        .iter()
        .enumerate()
        .map(|(ci, &c)| (c, average(&cat_ap.iter().map(|r| r[ci]).collect::<Vec<_>>())))
        .collect();
    let ap = if categories.is_empty() {
        None
    } else {
        average(&stats.iter().map(|s| s.ap.expect("categories present")).collect::<Vec<_>>())
    };
    Ok(ApReport {
        kind,
        ap,
        thresholds: stats,
        per_category,
        size_buckets: None,
    })
}

fn average(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    Some(s / v.len() as f64)
}

/// An image's predictions by descending score; equal scores keep input order.
fn rank<'a>(predictions: &'a [Prediction], image: &str) -> Vec<&'a Prediction> {
    let mut keyed: Vec<(usize, &Prediction)> = predictions.iter().enumerate().filter(|(_, p)| p.image_id == image).collect();
    keyed.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    keyed.truncate(DEFAULT_MAX_DETS);
    keyed.into_iter().map(|(_, p)| p).collect()
}

fn greedy_consistent_matching(table: &[Vec<f64>], t: f64) -> Result<Vec<Option<usize>>> {
    let n_gt = table.first().map_or(0, Vec::len);
    let mut all = Vec::new();
    let mut current = Vec::with_capacity(table.len());
    enumerate(table, t, n_gt, &mut vec![false; n_gt], &mut current, &mut all);
    let consistent: Vec<Vec<Option<usize>>> = all.into_iter().filter(|m| is_greedy(table, t, m)).collect();
    match consistent.len() {
        1 => Ok(consistent.into_iter().next().expect("one matching")),
        n => Err(Error::arg(format!("{n} matchings satisfy the greedy rule; expected exactly one"))),
    }
}

fn enumerate(
    table: &[Vec<f64>],
    t: f64,
    n_gt: usize,
    used: &mut Vec<bool>,
    current: &mut Vec<Option<usize>>,
    out: &mut Vec<Vec<Option<usize>>>,
) {
    let i = current.len();
    if i == table.len() {
        out.push(current.clone());
        return;
    }
    current.push(None);
    enumerate(table, t, n_gt, used, current, out);
    current.pop();
    for k in 0..n_gt {
        if !used[k] && table[i][k] >= t {
            used[k] = true;
            current.push(Some(k));
            enumerate(table, t, n_gt, used, current, out);
            current.pop();
            used[k] = false;
        }
    }
}

fn is_greedy(table: &[Vec<f64>], t: f64, m: &[Option<usize>]) -> bool {
    let mut used = vec![false; table.first().map_or(0, Vec::len)];
    for (i, choice) in m.iter().enumerate() {
        let best_iou = (0..used.len())
            .filter(|&k| !used[k] && table[i][k] >= t)
            .map(|k| table[i][k])
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        match (choice, best_iou) {
            (None, None) => {}
            (Some(k), Some(b)) => {
                let first_best = (0..used.len()).find(|&j| !used[j] && table[i][j] >= t && table[i][j] == b);
                if first_best != Some(*k) {
                    return false;
                }
                used[*k] = true;
            }
            _ => return false,
        }
    }
    true
}

/// Mean over recall points `r` of `max { precision_k : recall_k ≥ r }`.
fn direct_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= target)
            .map(|(_, p)| *p)
            .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
        if let Some(p) = best {
            sum += p;
        }
    }
    sum / RECALL_POINTS as f64
}
