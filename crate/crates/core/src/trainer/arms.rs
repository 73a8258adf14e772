//! Comparison arms: which phases run before fine-tuning, and with which
//! overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{amt2_run, coco_pretrain, finetune_on, moco_pretrain, TrainConfig, TrainEvent};
use crate::data::plan::build_plan_with;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::{Detector, DetectorParams, Group};
use crate::moco::MoCoState;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Kaiming init, fine-tune only.
    Scratch,
    /// Supervised natural-image pre-training, then fine-tune.
    Coco,
    /// MoCo on cells only; neck and head stay at their random init.
    CellsMoco,
    /// MoCo backbone grafted onto the pre-trained neck and head.
    CocoPp,
    /// Pre-training, alternating schedule, fine-tune.
    Cupre,
    /// As `Cupre` with `alpha = 0` (no anchor term).
    CupreMm,
    /// As `Cupre` with the anchor penalty also applied during fine-tuning.
    CuprePp,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::Scratch,
        Arm::Coco,
        Arm::CellsMoco,
        Arm::CocoPp,
        Arm::Cupre,
        Arm::CupreMm,
        Arm::CuprePp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Scratch => "scratch",
            Arm::Coco => "coco",
            Arm::CellsMoco => "cells-moco",
            Arm::CocoPp => "coco-pp",
            Arm::Cupre => "cupre",
            Arm::CupreMm => "cupre-mm",
            Arm::CuprePp => "cupre-pp",
        }
    }

    pub fn uses_pretrain(self) -> bool {
        matches!(self, Arm::Coco | Arm::CocoPp | Arm::Cupre | Arm::CupreMm | Arm::CuprePp)
    }

    pub fn uses_amt2(self) -> bool {
        matches!(self, Arm::Cupre | Arm::CupreMm | Arm::CuprePp)
    }

    pub fn uses_moco_only(self) -> bool {
        matches!(self, Arm::CellsMoco | Arm::CocoPp)
    }

    /// Configuration with the arm's overrides applied.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Arm::CupreMm => c.amt2.alpha = 0.0,
            Arm::CuprePp => c.finetune.l2sp_finetune = true,
            _ => {}
        }
        c
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s || a.as_str().replace('-', "_") == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Arm::ALL.iter().map(|a| a.as_str()).collect();
                Error::arg(format!("unknown arm {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

pub struct ArmData<'a> {
    /// Annotated natural-image corpus.
    pub coco: &'a [ImageSample],
    /// Unlabeled cell images.
    pub cells: &'a [ImageSample],
    /// Few-shot annotated cell images.
    pub finetune: &'a [&'a ImageSample],
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub params: DetectorParams,
    pub moco: Option<MoCoState>,
    pub events: Vec<TrainEvent>,
}

/// Kaiming-initialized parameters shared by every arm for a given seed.
pub fn initial_params(det: &Detector, seed: u64) -> DetectorParams {
    let (_, mut p) = Detector::new(det.config).expect("validated config");
    crate::model::kaiming_init(&mut p, rng::derive(seed, "init", 0));
    p
}

/// Everything the arm runs before fine-tuning. `pretrained` may carry the
/// result of the natural-image phase for the same seed and configuration.
pub fn pre_finetune(
    arm: Arm,
    det: &Detector,
    config: &TrainConfig,
    data: &ArmData,
    pretrained: Option<&(DetectorParams, Vec<TrainEvent>)>,
) -> Result<ArmOutcome> {
    let config = arm.configure(config);
    let init = initial_params(det, config.seed);
    let mut events = Vec::new();
    let mut moco = None;
    let mut params = init.clone();
    if arm.uses_pretrain() {
        let (p, ev) = match pretrained {
            Some((p, ev)) => (p.clone(), ev.clone()),
            None => {
                let mut p = init.clone();
                let ev = coco_pretrain(det, &mut p, data.coco, &config)?;
                (p, ev)
            }
        };
        params = p;
        events.extend(ev);
    }
    if arm.uses_moco_only() {
        let mut p = init.clone();
        events.extend(moco_pretrain(det, &mut p, data.cells, &config, &mut moco)?);
        params.restore(Group::Backbone, p.values(Group::Backbone))?;
        params.restore(Group::Projection, p.values(Group::Projection))?;
    }
    if arm.uses_amt2() {
        let coco_ids: Vec<String> = data.coco.iter().map(|s| s.id.clone()).collect();
        let cell_ids: Vec<String> = data.cells.iter().map(|s| s.id.clone()).collect();
        let plan = build_plan_with(&coco_ids, &cell_ids, rng::derive(config.seed, "plan", 0), config.amt2.amt2_iterations)?;
        events.extend(amt2_run(det, &mut params, &plan, data.cells, data.coco, &config, &mut moco)?);
    }
    Ok(ArmOutcome { params, moco, events })
}

/// The arm's full pipeline ending with fine-tuning.
pub fn run_arm(arm: Arm, det: &Detector, config: &TrainConfig, data: &ArmData) -> Result<ArmOutcome> {
    let mut out = pre_finetune(arm, det, config, data, None)?;
    let config = arm.configure(config);
    out.events.extend(finetune_on(det, &mut out.params, data.finetune, &config)?);
    Ok(out)
}
