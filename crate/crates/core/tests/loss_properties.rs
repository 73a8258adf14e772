use proptest::prelude::*;
use segpre::data::{synth_dataset, Domain};
use segpre::losses::{contrastive_from_similarities, instance_loss, l2sp_penalty, ContrastiveForm};
use segpre::model::{prepare_input, Detector, ModelConfig};

proptest! {
    #[test]
    fn contrastive_decreases_with_positive_similarity(
        pos in -1.0f64..0.95,
        bump in 0.001f64..0.05,
        negs in prop::collection::vec(-1.0f64..1.0, 0..6),
        tau in 0.05f64..1.0,
    ) {
        let a = contrastive_from_similarities(pos, &negs, tau, ContrastiveForm::Standard).unwrap();
        let b = contrastive_from_similarities(pos + bump, &negs, tau, ContrastiveForm::Standard).unwrap();
        prop_assert!(b <= a);
        prop_assert!(a >= 0.0 && a.is_finite());
    }

    #[test]
    fn contrastive_increases_with_negative_similarity(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..0.95, 1..6),
        k in 0usize..6,
        bump in 0.001f64..0.05,
        tau in 0.05f64..1.0,
    ) {
        let k = k % negs.len();
        let mut moved = negs.clone();
        moved[k] += bump;
        for form in [ContrastiveForm::Standard, ContrastiveForm::NegativesOnly] {
            let a = contrastive_from_similarities(pos, &negs, tau, form).unwrap();
            let b = contrastive_from_similarities(pos, &moved, tau, form).unwrap();
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn l2sp_is_convex(
        seed_vecs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..12),
        alpha in 0.0f64..=1.0,
    ) {
        let a: Vec<f64> = seed_vecs.iter().map(|t| t.0).collect();
        let b: Vec<f64> = seed_vecs.iter().map(|t| t.1).collect();
        let w0: Vec<f64> = seed_vecs.iter().map(|t| t.2).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let lhs = l2sp_penalty(&mid, &w0, alpha).unwrap();
        let rhs = 0.5 * (l2sp_penalty(&a, &w0, alpha).unwrap() + l2sp_penalty(&b, &w0, alpha).unwrap());
        prop_assert!(lhs <= rhs + 1e-9);
    }
}

#[test]
fn instance_loss_breakdown_sums_on_every_evaluation() {
    let (det, params) = Detector::init(ModelConfig::default(), 1).unwrap();
    for domain in [Domain::NaturalLike, Domain::CellLike] {
        for s in synth_dataset(domain, 6, 7).unwrap() {
            let x = prepare_input(&s.gray(), s.height, s.width).unwrap();
            let out = det.forward(&params, &x, (s.height, s.width)).unwrap();
            for anns in [&s.annotations[..], &[]] {
                let l = instance_loss(&out, anns).unwrap();
                assert!((l.total - (l.clas + l.bbox + l.seg + l.contra + l.reg)).abs() < 1e-9);
                assert!(l.clas >= 0.0 && l.bbox >= 0.0 && l.seg >= 0.0);
            }
        }
    }
}
