use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A seeded few-shot selection of image ids. `selected_ids` keeps the sampled
/// order; `holdout_ids` keeps the input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub fraction: f64,
    pub seed: u64,
    pub selected_ids: Vec<String>,
    pub holdout_ids: Vec<String>,
}

/// Samples `max(1, floor(fraction * N))` ids uniformly without replacement.
pub fn make_few_shot_split(ids: &[String], fraction: f64, seed: u64) -> Result<FewShotSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("few-shot fraction {fraction} is outside (0, 1]")));
    }
    if ids.is_empty() {
        return Err(Error::arg("cannot split an empty id list"));
    }
    let n = ids.len();
    // Small epsilon so that e.g. 0.07 * 100 does not floor to 6.
    let k = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, "few-shot", 0)));
    let mut chosen = vec![false; n];
    let selected_ids = order[..k]
        .iter()
        .map(|&i| {
            chosen[i] = true;
            ids[i].clone()
        })
        .collect();
    let holdout_ids = ids
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(FewShotSplit {
        fraction,
        seed,
        selected_ids,
        holdout_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    #[test]
    fn exact_division() {
        assert_eq!(make_few_shot_split(&ids(100), 0.05, 0).unwrap().selected_ids.len(), 5);
    }

    #[test]
    fn floors_fractional_size() {
        let s = make_few_shot_split(&ids(103), 0.05, 0).unwrap();
        assert_eq!(s.selected_ids.len(), 5);
        assert_eq!(s.holdout_ids.len(), 98);
    }

    #[test]
    fn minimum_one() {
        assert_eq!(make_few_shot_split(&ids(3), 0.05, 1).unwrap().selected_ids.len(), 1);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = make_few_shot_split(&ids(50), 0.2, 9).unwrap();
        let b = make_few_shot_split(&ids(50), 0.2, 9).unwrap();
        assert_eq!(a, b);
        let sel: HashSet<_> = a.selected_ids.iter().collect();
        assert!(a.holdout_ids.iter().all(|id| !sel.contains(id)));
        assert_eq!(sel.len() + a.holdout_ids.len(), 50);
    }

    #[test]
    fn standard_fractions_follow_floor_rule() {
        for n in [7usize, 40, 103, 250] {
            for f in [0.05, 0.10, 0.15, 0.20, 0.8] {
                let s = make_few_shot_split(&ids(n), f, 3).unwrap();
                let expect = ((f * n as f64 + 1e-9).floor() as usize).max(1);
                assert_eq!(s.selected_ids.len(), expect, "n={n} f={f}");
            }
        }
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(make_few_shot_split(&ids(10), 0.0, 0).is_err());
        assert!(make_few_shot_split(&ids(10), 1.5, 0).is_err());
        assert!(make_few_shot_split(&[], 0.5, 0).is_err());
    }
}
