use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const AMT2_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanIteration {
    pub coco_subset_ids: Vec<String>,
    pub cell_replicate_ids: Vec<String>,
}

/// Pairing of COCO subsets with full replicates of the unlabeled cell corpus,
/// one entry per alternating-training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Amt2Plan {
    pub iterations: Vec<PlanIteration>,
}

impl Amt2Plan {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

/// Shuffles `coco_ids` once and cuts it into ten contiguous chunks; the first
/// `N mod 10` chunks take one extra id.
pub fn build_amt2_plan(coco_ids: &[String], cell_ids: &[String], seed: u64) -> Result<Amt2Plan> {
    build_plan_with(coco_ids, cell_ids, seed, AMT2_ITERATIONS)
}

pub fn build_plan_with(
    coco_ids: &[String],
    cell_ids: &[String],
    seed: u64,
    iterations: usize,
) -> Result<Amt2Plan> {
    if iterations == 0 {
        return Err(Error::arg("plan needs at least one iteration"));
    }
    if coco_ids.len() < iterations {
        return Err(Error::arg(format!(
            "need at least {iterations} COCO images to build the plan, got {}",
            coco_ids.len()
        )));
    }
    if cell_ids.is_empty() {
        return Err(Error::arg("unlabeled cell image list is empty"));
    }
    let mut shuffled = coco_ids.to_vec();
    shuffled.shuffle(&mut rng::seeded(rng::derive(seed, "amt2-plan", 0)));

    let base = shuffled.len() / iterations;
    let extra = shuffled.len() % iterations;
    let mut start = 0;
    let iterations = (0..iterations)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let subset = shuffled[start..start + len].to_vec();
            start += len;
            PlanIteration {
                coco_subset_ids: subset,
                cell_replicate_ids: cell_ids.to_vec(),
            }
        })
        .collect();
    Ok(Amt2Plan { iterations })
}
