mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{ap_values, random_box, rect_mask, scene, Scene};
use segpre::data::{rle_decode, rle_encode, BBox};
use segpre::eval::{
    average_precision, oracle_ap, predictions_from_results, results_json, GroundTruth, IouKind, Prediction,
};

#[test]
fn oracle_agrees_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_delta: f64 = 0.0;
    for i in 0..500 {
        let s = scene(&mut rng, false);
        let kind = if i % 2 == 0 { IouKind::Bbox } else { IouKind::Segm };
        let fast = average_precision(&s.preds, &s.gts, kind).unwrap();
        let slow = oracle_ap(&s.preds, &s.gts, kind).unwrap();
        for (a, b) in ap_values(&fast).into_iter().zip(ap_values(&slow)) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    assert_eq!(a.to_bits(), b.to_bits(), "scene {i}: {a} vs {b}");
                    max_delta = max_delta.max((a - b).abs());
                }
                (None, None) => {}
                _ => panic!("scene {i}: defined/undefined mismatch"),
            }
        }
        for (x, y) in fast.thresholds.iter().zip(&slow.thresholds) {
            assert_eq!((x.tp, x.fp, x.fn_), (y.tp, y.fp, y.fn_), "scene {i}");
        }
    }
    assert_eq!(max_delta, 0.0);
}

#[test]
fn oracle_empty_scene_and_domain() {
    let r = oracle_ap(&[], &[], IouKind::Bbox).unwrap();
    assert_eq!(r.ap, None);
    assert_eq!(average_precision(&[], &[], IouKind::Bbox).unwrap().ap, None);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = BBox::new(0.0, 0.0, 4.0, 4.0);
    let many: Vec<Prediction> = (0..11)
        .map(|i| Prediction {
            image_id: "a".into(),
            category: 1,
            score: i as f64 / 11.0,
            bbox: b,
            mask: rect_mask(b, &mut rng, false),
        })
        .collect();
    assert!(oracle_ap(&many, &[], IouKind::Bbox).is_err());
}

#[test]
fn ladder_case_cross_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = BBox::new(0.0, 0.0, 10.0, 10.0);
    let p = BBox::new(0.0, 0.0, 6.0, 10.0);
    let gts = vec![GroundTruth {
        image_id: "a".into(),
        category: 1,
        bbox: g,
        mask: rect_mask(g, &mut rng, false),
    }];
    let preds = vec![Prediction {
        image_id: "a".into(),
        category: 1,
        score: 0.9,
        bbox: p,
        mask: rect_mask(p, &mut rng, false),
    }];
    for kind in [IouKind::Bbox, IouKind::Segm] {
        let fast = average_precision(&preds, &gts, kind).unwrap();
        assert_eq!(fast.ap, Some(0.3));
        assert_eq!(oracle_ap(&preds, &gts, kind).unwrap().ap, Some(0.3));
    }
}

/// Indices of predictions matched at threshold index `ti`, found by dropping
/// each prediction in turn and watching the TP count.
fn true_positives(s: &Scene, kind: IouKind, ti: usize) -> Vec<usize> {
    let base = average_precision(&s.preds, &s.gts, kind).unwrap().thresholds[ti].tp;
    (0..s.preds.len())
        .filter(|&i| {
            let mut p = s.preds.clone();
            p.remove(i);
            average_precision(&p, &s.gts, kind).unwrap().thresholds[ti].tp < base
        })
        .collect()
}

#[test]
fn ap_monotone_under_mutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 200 {
        let s = scene(&mut rng, false);
        if s.gts.is_empty() {
            continue;
        }
        let kind = if checked % 2 == 0 { IouKind::Bbox } else { IouKind::Segm };
        let before = average_precision(&s.preds, &s.gts, kind).unwrap();

        // A false positive below every existing score.
        let lowest = s.preds.iter().map(|p| p.score).fold(1.0, f64::min);
        let b = random_box(&mut rng);
        let mut added = s.preds.clone();
        added.push(Prediction {
            image_id: s.gts[0].image_id.clone(),
            category: 9,
            score: lowest / 2.0,
            bbox: b,
            mask: rect_mask(b, &mut rng, false),
        });
        let after = average_precision(&added, &s.gts, kind).unwrap();
        assert!(after.ap.unwrap() <= before.ap.unwrap());
        for (x, y) in after.thresholds.iter().zip(&before.thresholds) {
            assert!(x.ap.unwrap() <= y.ap.unwrap());
        }

        // Removing a true positive at some threshold.
        let ti = rng.random_range(0..10);
        let tps = true_positives(&s, kind, ti);
        if let Some(&i) = tps.first() {
            let mut removed = s.preds.clone();
            removed.remove(i);
            let after = average_precision(&removed, &s.gts, kind).unwrap();
            assert!(
                after.thresholds[ti].ap.unwrap() <= before.thresholds[ti].ap.unwrap(),
                "threshold {ti}: {:?} > {:?}",
                after.thresholds[ti].ap,
                before.thresholds[ti].ap
            );
        }
        checked += 1;
    }
}

#[test]
fn per_threshold_ap_non_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let s = scene(&mut rng, false);
        for kind in [IouKind::Bbox, IouKind::Segm] {
            let r = average_precision(&s.preds, &s.gts, kind).unwrap();
            let aps: Vec<f64> = r.thresholds.iter().filter_map(|t| t.ap).collect();
            for w in aps.windows(2) {
                assert!(w[1] <= w[0], "{aps:?}");
            }
            for t in &r.thresholds {
                if let Some(a) = t.ap {
                    assert!((0.0..=1.0).contains(&a));
                }
            }
        }
    }
}

#[test]
fn shuffling_predictions_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let s = scene(&mut rng, true);
        let mut shuffled = s.preds.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        for kind in [IouKind::Bbox, IouKind::Segm] {
            let a = average_precision(&s.preds, &s.gts, kind).unwrap();
            let b = average_precision(&shuffled, &s.gts, kind).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn rle_path_matches_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let s = scene(&mut rng, true);
        for p in &s.preds {
            for g in &s.gts {
                let direct = segpre::eval::mask_iou(&p.mask, &g.mask).unwrap();
                let pa = rle_decode(&rle_encode(&p.mask).unwrap()).unwrap();
                let ga = rle_decode(&rle_encode(&g.mask).unwrap()).unwrap();
                assert_eq!(segpre::eval::mask_iou(&pa, &ga).unwrap().to_bits(), direct.to_bits());
            }
        }
        let back = predictions_from_results(&results_json(&s.preds).unwrap()).unwrap();
        assert_eq!(
            average_precision(&back, &s.gts, IouKind::Segm).unwrap(),
            average_precision(&s.preds, &s.gts, IouKind::Segm).unwrap()
        );
    }
}
